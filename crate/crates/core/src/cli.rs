//! Command-line front end. Exit codes: 0 ok, 1 usage or input error,
//! 2 data-quality threshold breach, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, RUN_CONFIG_META};
use crate::dataset::{load_examples, pair_items, write_corpus, write_curation_corpus, CurationSpec, Example};
use crate::error::{Error, Result};
use crate::evaluation::{metrics_table, Direction, MetricsRecord};
use crate::model::{ModelConfig, RawSample};
use crate::pipeline::clients::{ClientSuite, HttpTransport};
use crate::pipeline::record::{read_corpus, to_jsonl, Corpus};
use crate::pipeline::{run_stage, Stage, StageContext, StageOutput};
use crate::recipe::{evaluate, ladder, ladder_table, train_fresh, EvalOptions, LADDER};
use crate::synth::SynthWorld;
use crate::train::{epoch_means, load_checkpoint, save_checkpoint, StepRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_QUALITY: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vtrecipe", version, about = "Video-text retrieval adaptation toolkit")]
pub struct Cli {
    /// TOML config, or an artifact whose embedded config should be replayed.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pipeline.top_fraction=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct StageArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rejection log; defaults to `<out>.rejected.jsonl`.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mean per-frame alignment of each record's frames with its raw text.
    Score(StageArgs),
    /// Keep the best-scored fraction of the corpus.
    Filter {
        #[command(flatten)]
        io: StageArgs,
        #[arg(long)]
        top_fraction: Option<f64>,
    },
    /// Select key-frames by temporal-segment density peaks.
    Keyframes {
        #[command(flatten)]
        io: StageArgs,
        #[arg(long)]
        n_key: Option<usize>,
    },
    /// Caption every key-frame.
    Caption(StageArgs),
    /// Produce long and short rewrites from raw text and captions.
    Rewrite(StageArgs),
    /// Reject rewrites that are empty, out of band or degenerate.
    Postprocess(StageArgs),
    /// Assign long or short training text by id parity.
    Mix(StageArgs),
    /// Run all seven curation stages, writing each stage's output.
    Curate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write synthetic corpora.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train the branch and heads on a paired corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Retrieval metrics of a checkpoint on a paired test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Re-weight scores with the dual softmax.
        #[arg(long)]
        dsl: bool,
        /// t2v, v2t or both.
        #[arg(long, default_value = "both")]
        direction: String,
        /// Comma-separated components to disable: stan, mug, acg.
        #[arg(long, default_value = "")]
        ablate: String,
        /// Machine-readable metrics; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test each rung of the component ladder over several seeds.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Paired train and test corpora with a planted correspondence.
    Pairs {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        test: usize,
    },
    /// Raw web-style corpus for the curation stages.
    Curation {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        records: usize,
        #[arg(long, default_value_t = 0.3)]
        mismatched: f64,
        #[arg(long, default_value_t = 0.0)]
        missing_frames: f64,
    },
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// File config (explicit, env or the one embedded in `fallback`) with
/// flags applied on top.
fn resolve_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let explicit = cli.config.is_some() || std::env::var_os(crate::config::CONFIG_ENV).is_some_and(|v| !v.is_empty());
    let mut cfg = match (explicit, fallback) {
        (false, Some(p)) => RunConfig::read(p)?,
        _ => RunConfig::load(cli.config.as_deref())?,
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.pipeline.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn init_threads(n: usize) {
    if n > 0 {
        // a second call (tests running commands in one process) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn meta(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "tool": "vtrecipe",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg.to_json(),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(bytes)?;
    Ok(())
}

fn write_artifact<T: Serialize>(path: &Path, meta: &Value, items: &[T]) -> Result<()> {
    write_bytes(path, &to_jsonl(Some(meta), items)?)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn normalize(p: &Path) -> PathBuf {
    let abs = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// `target` expressed relative to directory `base`.
pub fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let (t, b) = (normalize(target), normalize(base));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    out
}

/// Re-points relative frame references when the output lands in another
/// directory than the input.
fn rebase_refs(out: &mut StageOutput, from: &Path, to: &Path) {
    if normalize(from) == normalize(to) {
        return;
    }
    let fix = |r: &mut String| {
        if Path::new(r.as_str()).is_relative() {
            *r = relative_to(&from.join(&*r), to).to_string_lossy().into_owned();
        }
    };
    out.records.iter_mut().for_each(|r| fix(&mut r.frame_ref));
    out.rejections.iter_mut().for_each(|r| fix(&mut r.record.frame_ref));
}

fn clients_for(cfg: &RunConfig) -> Result<ClientSuite> {
    match cfg.client.kind.as_str() {
        "mock" => Ok(ClientSuite::mock(cfg.dim, cfg.text_seed)),
        "remote" => {
            let url = cfg.client.endpoint.clone().ok_or_else(|| Error::Config("client.endpoint is unset".into()))?;
            Ok(ClientSuite::remote(HttpTransport::new(url), cfg.client.retry.clone()))
        }
        other => Err(Error::Config(format!("unknown client kind {other:?}"))),
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// One stage over `corpus`: writes output and rejection log, prints the
/// report, and says whether the flagged share breached the threshold.
fn stage_command(stage: Stage, corpus: Corpus, out: &Path, rejects: &Path, cfg: &RunConfig) -> Result<bool> {
    let clients = clients_for(cfg)?;
    let ctx = StageContext {
        config: &cfg.pipeline,
        clients: &clients,
        base_dir: &corpus.base_dir,
    };
    let mut output = run_stage(stage, corpus.records, &ctx)?;
    if !output.conserves() {
        return Err(Error::Pipeline(format!("{} lost records", stage.name())));
    }
    rebase_refs(&mut output, &corpus.base_dir, &parent_dir(out));
    let m = meta(stage.name(), cfg);
    write_artifact(out, &m, &output.records)?;
    write_artifact(rejects, &m, &output.rejections)?;
    let report = output.report();
    println!("{}", serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?);
    let breach = output.flagged_fraction() > cfg.pipeline.max_flagged_fraction;
    if breach {
        eprintln!(
            "{}: {} of {} records flagged, above the {:.1}% threshold",
            stage.name(),
            report.flagged,
            report.input,
            100.0 * cfg.pipeline.max_flagged_fraction
        );
    }
    Ok(breach)
}

fn quality_exit(breach: bool) -> i32 {
    if breach {
        EXIT_QUALITY
    } else {
        EXIT_OK
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let stage_io = |stage: Stage, io: &StageArgs, cfg: RunConfig| -> Result<i32> {
        cfg.validate()?;
        init_threads(cfg.threads);
        let corpus = read_corpus(&io.input)?;
        let rejects = io.rejects.clone().unwrap_or_else(|| with_suffix(&io.out, ".rejected.jsonl"));
        Ok(quality_exit(stage_command(stage, corpus, &io.out, &rejects, &cfg)?))
    };
    match &cli.command {
        Command::Score(io) => stage_io(Stage::Score, io, resolve_config(cli, None)?),
        Command::Filter { io, top_fraction } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(f) = top_fraction {
                cfg.pipeline.top_fraction = *f;
            }
            stage_io(Stage::Filter, io, cfg)
        }
        Command::Keyframes { io, n_key } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(n) = n_key {
                cfg.pipeline.n_key = *n;
            }
            stage_io(Stage::Keyframes, io, cfg)
        }
        Command::Caption(io) => stage_io(Stage::Caption, io, resolve_config(cli, None)?),
        Command::Rewrite(io) => stage_io(Stage::Rewrite, io, resolve_config(cli, None)?),
        Command::Postprocess(io) => stage_io(Stage::Postprocess, io, resolve_config(cli, None)?),
        Command::Mix(io) => stage_io(Stage::Mix, io, resolve_config(cli, None)?),
        Command::Curate { input, out_dir } => {
            let cfg = resolve_config(cli, None)?;
            cfg.validate()?;
            init_threads(cfg.threads);
            let mut current = input.clone();
            let mut breach = false;
            for (i, stage) in Stage::ALL.iter().enumerate() {
                let out = out_dir.join(format!("{}_{}.jsonl", i + 1, stage.name()));
                let rejects = out_dir.join(format!("{}_{}.rejected.jsonl", i + 1, stage.name()));
                breach |= stage_command(*stage, read_corpus(&current)?, &out, &rejects, &cfg)?;
                current = out;
            }
            Ok(quality_exit(breach))
        }
        Command::Synth(sc) => {
            let cfg = resolve_config(cli, None)?;
            cfg.validate()?;
            synth_command(sc, &cfg)
        }
        Command::Train {
            corpus,
            out,
            log,
            epochs,
            lr,
        } => {
            let mut cfg = resolve_config(cli, None)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.lr = *l;
            }
            cfg.validate()?;
            init_threads(cfg.threads);
            train_command(&cfg, corpus, out, &log.clone().unwrap_or_else(|| with_suffix(out, ".log.jsonl")))
        }
        Command::Eval {
            checkpoint,
            testset,
            dsl,
            direction,
            ablate,
            out,
        } => {
            let cfg = resolve_config(cli, Some(checkpoint))?;
            cfg.validate()?;
            init_threads(cfg.threads);
            eval_command(&cfg, checkpoint, testset, *dsl, direction, ablate, out.as_deref())
        }
        Command::Ablate {
            corpus,
            testset,
            seeds,
            out,
        } => {
            let cfg = resolve_config(cli, None)?;
            cfg.validate()?;
            init_threads(cfg.threads);
            ablate_command(&cfg, corpus, testset, seeds, out.as_deref())
        }
    }
}

fn synth_command(sc: &SynthCommand, cfg: &RunConfig) -> Result<i32> {
    match sc {
        SynthCommand::Pairs { out_dir, train, test } => {
            let m = meta("synth pairs", cfg);
            let split = |frames: usize, n: usize, seed: u64, name: &str| -> Result<PathBuf> {
                let mc = ModelConfig {
                    n_frames: frames,
                    ..cfg.model_config()
                };
                let world = SynthWorld::new(&mc, cfg.synth.clone())?;
                write_corpus(out_dir, name, &m, &pair_items(&world.pairs(n, seed, name)))
            };
            let (_, tr, te) = crate::recipe::run_seeds(cfg.seed);
            let a = split(cfg.frames_train, *train, tr, "train")?;
            let b = split(cfg.frames_eval, *test, te, "test")?;
            println!("{}\n{}", a.display(), b.display());
        }
        SynthCommand::Curation {
            out_dir,
            records,
            mismatched,
            missing_frames,
        } => {
            let spec = CurationSpec {
                records: *records,
                dim: cfg.dim,
                text_seed: cfg.text_seed,
                seed: cfg.seed,
                mismatched: *mismatched,
                missing_frames: *missing_frames,
                ..CurationSpec::default()
            };
            println!("{}", write_curation_corpus(out_dir, "curation", &spec)?.display());
        }
    }
    Ok(EXIT_OK)
}

fn raw(examples: Vec<Example>) -> Vec<RawSample> {
    examples.into_iter().map(|e| e.raw).collect()
}

fn train_command(cfg: &RunConfig, corpus: &Path, out: &Path, log_path: &Path) -> Result<i32> {
    let mc = cfg.model_config();
    let data = raw(load_examples(&read_corpus(corpus)?, mc.n_frames, mc.n_patches)?);
    let tc = cfg.train_config();
    let outcome = train_fresh(&mc, &tc, cfg.seed, &data, |r| log::debug!("step {} loss {:.6}", r.step, r.loss))?;
    let config_meta = vec![(RUN_CONFIG_META.to_string(), cfg.to_json().to_string())];
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&outcome.state, out, &config_meta)?;
    write_artifact::<StepRecord>(log_path, &meta("train", cfg), &outcome.log)?;
    for (e, m) in epoch_means(&outcome.log).iter().enumerate() {
        println!("epoch {} mean loss {m:.6}", e + 1);
    }
    match outcome.error {
        Some(e) => {
            eprintln!("error: {e}; checkpoint holds the last good state");
            Ok(EXIT_NUMERIC)
        }
        None => Ok(EXIT_OK),
    }
}

fn directions(s: &str) -> Result<Vec<Direction>> {
    match s {
        "both" => Ok(vec![Direction::TextToVideo, Direction::VideoToText]),
        other => Ok(vec![Direction::parse(other)?]),
    }
}

/// Test items with at least `frames` frames each.
fn load_testset(path: &Path, frames: usize, patches: usize) -> Result<Vec<RawSample>> {
    let examples = load_examples(&read_corpus(path)?, frames, patches)?;
    if let Some(e) = examples.iter().find(|e| e.source_frames < frames) {
        return Err(Error::Config(format!(
            "test clip {} has {} frames, evaluation samples {frames}",
            e.id, e.source_frames
        )));
    }
    Ok(raw(examples))
}

fn dataset_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn eval_command(
    cfg: &RunConfig,
    checkpoint: &Path,
    testset: &Path,
    dsl: bool,
    direction: &str,
    ablate: &str,
    out: Option<&Path>,
) -> Result<i32> {
    let model = load_checkpoint(checkpoint)?.model;
    let components = model.config.components.ablate(ablate)?;
    let test = load_testset(testset, cfg.frames_eval, model.config.n_patches)?;
    let opts = EvalOptions {
        components,
        dsl_beta: dsl.then_some(cfg.dsl_beta),
        frames: cfg.frames_eval,
        tokens: cfg.tokens_eval,
    };
    let name = dataset_name(testset);
    let mut rows = Vec::new();
    for d in directions(direction)? {
        let m = evaluate(&model, &test, &opts, d)?;
        rows.push((components.label(), MetricsRecord::new(&name, d, m, dsl)));
    }
    print!("{}", metrics_table(&rows));
    if let Some(p) = out {
        let recs: Vec<Value> = rows
            .iter()
            .map(|(label, r)| {
                let mut v = serde_json::to_value(r).expect("metrics serialize");
                v["components"] = json!(label);
                v
            })
            .collect();
        write_artifact(p, &meta("eval", cfg), &recs)?;
    }
    Ok(EXIT_OK)
}

fn ablate_command(cfg: &RunConfig, corpus: &Path, testset: &Path, seeds: &[u64], out: Option<&Path>) -> Result<i32> {
    let mc = cfg.model_config();
    let train_raw = raw(load_examples(&read_corpus(corpus)?, mc.n_frames, mc.n_patches)?);
    let test_raw = load_testset(testset, cfg.frames_eval, mc.n_patches)?;
    let rows = ladder(&mc, &cfg.train_config(), seeds, &LADDER, cfg.frames_eval, cfg.tokens_eval, |_| {
        Ok((train_raw.clone(), test_raw.clone()))
    })?;
    print!("{}", ladder_table(&rows));
    if let Some(p) = out {
        write_artifact(p, &meta("ablate", cfg), &rows)?;
    }
    Ok(EXIT_OK)
}

