//! Command-line front end. Every command resolves one [`RunConfig`]
//! (defaults, then `--config`, then `--set`, then dedicated flags) and
//! echoes it into `metadata.json` next to its outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::data::{write_records, Batch, FeatureRecord};
use crate::diffmath::{Matrix, DEFAULT_EPS, DEFAULT_THRESHOLD};
use crate::embeddings::{random_embeddings, ClassRegistry};
use crate::error::Error;
use crate::evaluation::evaluate;
use crate::head::{grad_check_head, GraphKind, Head, HeadCheckpoint, HeadConfig, HeadMode, LossTerm, ParamGroup, TrainableSet};
use crate::pipeline::{finetune_k, prepare, seed_list, shot_sweep, train_base_head};
use crate::relation::{correlation_map, extract_graph, write_labeled_csv, GraphMode};
use crate::util::{self, fmt_sig9};
use crate::wordnet::{
    emit_removal_list, hyponym_closure, parse_hypernym_edges, ManifestFormat, Provenance, RemovalManifest,
};

pub const METADATA_FILE: &str = "metadata.json";
pub const CHECKPOINT_FILE: &str = "head.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "semrel", version, about = "Few-shot heads over class word embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration: flat dotted keys, nested objects, or a previous
    /// run's metadata.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// `KEY=VALUE` override; the value is read as JSON, or as a string when
    /// it does not parse.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    /// The class graph as an N x N CSV.
    Graph,
    /// Novel-by-base cosine tables before and after refinement.
    Correlate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic benchmark: registry, embeddings, train/test
    /// records and co-occurrence label sets.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Base training on base and background classes.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Expands a base checkpoint to the novel classes and fine-tunes it on a
    /// k-shot episode.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// none, dynamic, heuristic or tt.
        #[arg(long)]
        graph_mode: Option<String>,
        #[arg(long)]
        decouple: bool,
        /// Comma-separated parameter groups to freeze on top of the
        /// configured policy, or `all`.
        #[arg(long, value_delimiter = ',')]
        freeze: Vec<String>,
        /// `{"labels": [...]}` lines for the heuristic graph.
        #[arg(long)]
        cooccurrence: Option<String>,
    },
    /// Base training once per seed, then fine-tuning and evaluation for
    /// every shot count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shot counts; the configured list when absent.
        #[arg(long)]
        shots: Option<String>,
        /// Number of consecutive seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Top-1 accuracy of a checkpoint on test records.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test records; the configured or synthetic test split when absent.
        #[arg(long)]
        test: Option<String>,
    },
    /// Central-difference check of every head gradient on a random instance.
    Gradcheck {
        #[arg(long, default_value = "srr")]
        mode: String,
        /// Graph for srr heads.
        #[arg(long, default_value = "dynamic")]
        graph_mode: String,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Classes, background included.
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        embed_dim: usize,
        /// Feature and hidden width.
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 4)]
        reduced_dim: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        regression: bool,
        #[arg(long)]
        decouple: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also writes `gradcheck.json` here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exports the class graph or correlation maps of a checkpoint.
    Export {
        #[arg(value_enum)]
        what: ExportKind,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Hyponym closures of synset roots over a hypernym edge list.
    Closure {
        /// `hypernym<TAB>hyponym` lines.
        #[arg(long, required_unless_present = "golden")]
        edges: Option<PathBuf>,
        /// Comma-separated roots, reported under `--class`.
        #[arg(long, value_delimiter = ',')]
        roots: Vec<String>,
        #[arg(long, default_value = "roots")]
        class: String,
        /// `class: id, id, ...` lines, one class per line.
        #[arg(long)]
        roots_file: Option<PathBuf>,
        /// Emits the bundled VOC removal lists (restricted to `--only`).
        #[arg(long)]
        golden: bool,
        /// Comma-separated classes to keep.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Train { common } => cmd_train(&common),
        Command::Finetune {
            common,
            checkpoint,
            k,
            graph_mode,
            decouple,
            freeze,
            cooccurrence,
        } => cmd_finetune(&common, &checkpoint, k, graph_mode.as_deref(), decouple, &freeze, cooccurrence),
        Command::Sweep { common, shots, seeds } => cmd_sweep(&common, shots.as_deref(), seeds),
        Command::Eval { common, checkpoint, test } => cmd_eval(&common, &checkpoint, test),
        Command::Gradcheck {
            mode,
            graph_mode,
            threshold,
            eps,
            classes,
            embed_dim,
            hidden,
            reduced_dim,
            batch,
            regression,
            decouple,
            seed,
            out_dir,
        } => {
            let spec = GradcheckSpec {
                mode: mode.parse()?,
                graph: graph_mode.parse()?,
                classes,
                embed_dim,
                hidden,
                reduced_dim,
                batch,
                regression,
                decouple,
                seed,
            };
            cmd_gradcheck(&spec, threshold, eps, out_dir.as_deref(), &mut std::io::stdout().lock())
        }
        Command::Export { what, common, checkpoint } => cmd_export(what, &common, &checkpoint),
        Command::Closure {
            edges,
            roots,
            class,
            roots_file,
            golden,
            only,
            format,
            out,
        } => cmd_closure(ClosureArgs {
            edges,
            roots,
            class,
            roots_file,
            golden,
            only,
            format,
            out,
        }),
    }
}

fn parse_override(item: &str) -> CliResult<(String, Value)> {
    let (k, v) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Defaults, then `--config`, then `--set`, then `extra` (dedicated flags),
/// then `--seed`.
fn resolve_config(common: &Common, extra: Map<String, Value>) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut layer = Map::new();
    for item in &common.set {
        let (k, v) = parse_override(item)?;
        layer.insert(k, v);
    }
    layer.extend(extra);
    if let Some(s) = common.seed {
        layer.insert("seed".into(), json!(s));
    }
    if !layer.is_empty() {
        cfg = cfg.merged(&layer)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_file(path, |w| writeln!(w, "{text}"))
}

fn read_checkpoint(path: &Path) -> CliResult<Head> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: HeadCheckpoint = serde_json::from_reader(BufReader::new(file)).map_err(Error::from)?;
    Ok(Head::from_checkpoint(ck)?)
}

/// Run metadata. Feeding the file back through `--config` reproduces the
/// run.
fn write_metadata(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: Map<String, Value>,
    outputs: &[&str],
    hashes: Map<String, Value>,
) -> CliResult<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": Value::Object(cfg.to_flat()),
        "inputs": Value::Object(inputs),
        "outputs": outputs,
        "hashes": Value::Object(hashes),
    });
    write_json(&dir.join(METADATA_FILE), &meta)
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let cfg = resolve_config(common, Map::new())?;
    if cfg.data.train.is_some() || cfg.embeddings.path.is_some() {
        return Err(CliError::Usage("synth generates data; drop data.* and embeddings.path".into()));
    }
    let prep = prepare(&cfg, cfg.seed)?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    write_json(&dir.join("registry.json"), &prep.registry.to_file())?;
    write_file(&dir.join("embeddings.txt"), |w| prep.embeddings.write_word2vec(w))?;
    let train: Vec<FeatureRecord> = prep.base_train.iter().chain(&prep.novel_train).cloned().collect();
    for (name, records) in [("train.jsonl", &train), ("test.jsonl", &prep.test)] {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        write_records(&mut w, records)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    write_file(&dir.join("cooccurrence.jsonl"), |w| {
        for set in &prep.label_sets {
            writeln!(w, "{}", json!({ "labels": set }))?;
        }
        Ok(())
    })?;
    let mut hashes = Map::new();
    hashes.insert("embeddings".into(), json!(prep.embeddings.content_hash()));
    write_metadata(
        dir,
        "synth",
        &cfg,
        Map::new(),
        &["registry.json", "embeddings.txt", "train.jsonl", "test.jsonl", "cooccurrence.jsonl"],
        hashes,
    )
}

fn cmd_train(common: &Common) -> CliResult<()> {
    let cfg = resolve_config(common, Map::new())?;
    let prep = prepare(&cfg, cfg.seed)?;
    let (head, trace) = train_base_head(&cfg, &prep, cfg.seed)?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    write_json(&dir.join(CHECKPOINT_FILE), &head.to_checkpoint())?;
    write_file(&dir.join("loss_trace.csv"), |w| trace.write_csv(w))?;
    let mut hashes = Map::new();
    hashes.insert("embeddings".into(), json!(head.embeddings().content_hash()));
    hashes.insert("params".into(), json!(head.param_hash()));
    write_metadata(dir, "train", &cfg, Map::new(), &[CHECKPOINT_FILE, "loss_trace.csv"], hashes)
}

fn freeze_layer(cfg_trainable: &TrainableSet, freeze: &[String]) -> CliResult<TrainableSet> {
    let mut set = cfg_trainable.clone();
    for f in freeze.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        match f {
            "all" => set = TrainableSet::none(),
            "none" => {}
            other => {
                let g: ParamGroup = other.parse()?;
                set.0.remove(&g);
            }
        }
    }
    Ok(set)
}

fn cmd_finetune(
    common: &Common,
    checkpoint: &Path,
    k: Option<usize>,
    graph_mode: Option<&str>,
    decouple: bool,
    freeze: &[String],
    cooccurrence: Option<String>,
) -> CliResult<()> {
    let mut extra = Map::new();
    if let Some(k) = k {
        extra.insert("episode.k".into(), json!(k));
    }
    if let Some(g) = graph_mode {
        let kind: GraphKind = g.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
        extra.insert("head.graph".into(), json!(kind));
        if kind != GraphKind::None {
            extra.insert("head.mode".into(), json!(HeadMode::Srr));
        }
    }
    if decouple {
        extra.insert("decouple".into(), json!(true));
    }
    if let Some(c) = &cooccurrence {
        extra.insert("data.cooccurrence".into(), json!(c));
    }
    let mut cfg = resolve_config(common, extra)?;
    if cfg.head.graph == GraphKind::Heuristic && cfg.data.cooccurrence.is_none() {
        return Err(CliError::Usage(
            "--graph-mode heuristic needs --cooccurrence <label-set file>".into(),
        ));
    }
    if !freeze.is_empty() {
        let trainable = freeze_layer(&cfg.finetune.trainable, freeze)?;
        cfg = cfg.merged(&[("finetune.trainable".to_string(), json!(trainable))].into_iter().collect())?;
    }

    let base = read_checkpoint(checkpoint)?;
    let prep = prepare(&cfg, cfg.seed)?;
    let known = base.registry();
    if *known != prep.registry.base_only() && *known != prep.registry {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on classes that differ from the configured registry",
            checkpoint.display()
        ))
        .into());
    }
    if base.mode() == HeadMode::Baseline && cfg.head.mode != HeadMode::Baseline {
        cfg.head.mode = HeadMode::Baseline;
        cfg.head.graph = GraphKind::None;
    }
    let (head, episode, trace) = finetune_k(&cfg, &prep, &base, cfg.episode.k, cfg.seed)?;

    let dir = &common.out_dir;
    create_dir(dir)?;
    write_json(&dir.join(CHECKPOINT_FILE), &head.to_checkpoint())?;
    write_file(&dir.join("loss_trace.csv"), |w| trace.write_csv(w))?;
    write_file(&dir.join("episode.txt"), |w| {
        for id in episode.ids() {
            writeln!(w, "{id}")?;
        }
        Ok(())
    })?;
    let mut inputs = Map::new();
    inputs.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    let mut hashes = Map::new();
    hashes.insert("input_params".into(), json!(base.param_hash()));
    hashes.insert("params".into(), json!(head.param_hash()));
    hashes.insert("embeddings".into(), json!(head.embeddings().content_hash()));
    write_metadata(
        dir,
        "finetune",
        &cfg,
        inputs,
        &[CHECKPOINT_FILE, "loss_trace.csv", "episode.txt"],
        hashes,
    )
}

fn parse_shots(text: &str) -> CliResult<Vec<usize>> {
    let shots = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(k),
            _ => Err(CliError::Usage(format!("bad shot count `{s}`"))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    if shots.is_empty() {
        return Err(CliError::Usage("--shots must list at least one shot count".into()));
    }
    Ok(shots)
}

fn cmd_sweep(common: &Common, shots: Option<&str>, seeds: Option<usize>) -> CliResult<()> {
    let mut extra = Map::new();
    if let Some(text) = shots {
        extra.insert("episode.shots".into(), json!(parse_shots(text)?));
    }
    if let Some(n) = seeds {
        if n == 0 {
            return Err(CliError::Usage("--seeds must be at least 1".into()));
        }
        extra.insert("seeds".into(), json!(n));
    }
    let cfg = resolve_config(common, extra)?;
    let table = shot_sweep(&cfg, &cfg.episode.shots, &seed_list(&cfg))?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    write_file(&dir.join("sweep.csv"), |w| table.write_csv(w))?;
    let summary: Vec<Value> = table
        .summary()
        .iter()
        .map(|s| {
            json!({
                "k": s.k,
                "n": s.n,
                "base_mean": fmt_sig9(s.base_mean),
                "base_std": fmt_sig9(s.base_std),
                "novel_mean": fmt_sig9(s.novel_mean),
                "novel_std": fmt_sig9(s.novel_std),
            })
        })
        .collect();
    write_json(&dir.join("summary.json"), &json!({ "shots": summary }))?;
    write_metadata(dir, "sweep", &cfg, Map::new(), &["sweep.csv", "summary.json"], Map::new())
}

fn cmd_eval(common: &Common, checkpoint: &Path, test: Option<String>) -> CliResult<()> {
    let mut extra = Map::new();
    if let Some(t) = &test {
        extra.insert("data.test".into(), json!(t));
    }
    let cfg = resolve_config(common, extra)?;
    let head = read_checkpoint(checkpoint)?;
    let records = match &cfg.data.test {
        Some(p) => crate::pipeline::load_records(p)?,
        _ => prepare(&cfg, cfg.seed)?.test,
    };
    let (known, skipped): (Vec<FeatureRecord>, Vec<FeatureRecord>) =
        records.into_iter().partition(|r| head.registry().contains(&r.label));
    let report = evaluate(&head, &known)?;
    let dir = &common.out_dir;
    create_dir(dir)?;
    write_file(&dir.join("report.csv"), |w| report.write_csv(w))?;
    write_json(&dir.join("report.json"), &report)?;
    let mut inputs = Map::new();
    inputs.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    inputs.insert("records_skipped".into(), json!(skipped.len()));
    let mut hashes = Map::new();
    hashes.insert("params".into(), json!(head.param_hash()));
    write_metadata(dir, "eval", &cfg, inputs, &["report.csv", "report.json"], hashes)
}

/// Shape of the random instance probed by `gradcheck`.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSpec {
    pub mode: HeadMode,
    pub graph: GraphKind,
    pub classes: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub reduced_dim: usize,
    pub batch: usize,
    pub regression: bool,
    pub decouple: bool,
    pub seed: u64,
}

impl GradcheckSpec {
    pub fn small(mode: HeadMode) -> Self {
        Self {
            mode,
            graph: if mode == HeadMode::Srr { GraphKind::Dynamic } else { GraphKind::None },
            classes: 6,
            embed_dim: 16,
            hidden: 8,
            reduced_dim: 4,
            batch: 8,
            regression: false,
            decouple: false,
            seed: 0,
        }
    }
}

/// A head with every parameter redrawn at a scale where no gradient is
/// structurally zero, plus a labeled batch.
pub fn gradcheck_instance(spec: &GradcheckSpec) -> crate::Result<(Head, Batch)> {
    if spec.classes < 2 || spec.batch == 0 {
        return Err(Error::Config("gradcheck needs at least 2 classes and 1 record".into()));
    }
    let base: Vec<String> = (0..spec.classes - 1).map(|i| format!("class{i}")).collect();
    let registry = ClassRegistry::new(&base, &[] as &[String])?;
    let we = random_embeddings(&registry, spec.embed_dim, util::derive_seed(spec.seed, "gradcheck-embeddings", 0))?;
    let graph = match spec.mode {
        HeadMode::Srr => spec.graph,
        _ => GraphKind::None,
    };
    let heuristic = (graph == GraphKind::Heuristic).then(|| {
        let n = registry.len();
        let mut rng = util::rng(spec.seed, "gradcheck-graph", 0);
        let mut g = Matrix::zeros(n, n);
        for r in 0..n {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                g.set(r, c, v / s);
            }
        }
        g
    });
    let cfg = HeadConfig {
        mode: spec.mode,
        graph,
        d_in: spec.hidden,
        d: spec.hidden,
        reduced_dim: spec.reduced_dim,
        scale_attention: true,
        decoupled: spec.decouple,
        regression: spec.regression,
    };
    let mut head = crate::head::build_head(&cfg, &registry, &we, heuristic, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(spec.seed, "gradcheck-params", 0));
    let redrawn: crate::diffmath::ParamSet = head
        .params()
        .iter()
        .map(|(n, m)| (n.clone(), Matrix::randn(m.rows(), m.cols(), 0.5, &mut rng)))
        .collect();
    head.set_params(&redrawn)?;
    let records: Vec<FeatureRecord> = (0..spec.batch)
        .map(|i| FeatureRecord {
            id: format!("r{i}"),
            label: registry.entry(i % registry.len()).name.clone(),
            feat: (0..spec.hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reg: spec
                .regression
                .then(|| [rng.random(), rng.random(), rng.random(), rng.random()]),
        })
        .collect();
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let labels: Vec<usize> = (0..spec.batch).map(|i| i % registry.len()).collect();
    Ok((head, Batch::new(&refs, &labels)?))
}

/// Prints one row per parameter tensor; fails when any exceeds `threshold`.
pub fn cmd_gradcheck<W: Write>(
    spec: &GradcheckSpec,
    threshold: f64,
    eps: f64,
    out_dir: Option<&Path>,
    out: &mut W,
) -> CliResult<()> {
    let (head, batch) = gradcheck_instance(spec)?;
    let report = grad_check_head(&head, &batch, &TrainableSet::all(), LossTerm::Total, eps)?;
    let io = |e| CliError::Run(Error::io("<stdout>", e));
    writeln!(out, "{:<24} {:>8} {:>16} {:>16}", "parameter", "entries", "max_rel_error", "max_abs_error").map_err(io)?;
    for p in &report.params {
        writeln!(
            out,
            "{:<24} {:>8} {:>16} {:>16}",
            p.name,
            p.entries,
            fmt_sig9(p.max_rel_error),
            fmt_sig9(p.max_abs_error)
        )
        .map_err(io)?;
    }
    let passed = report.passes(threshold);
    writeln!(
        out,
        "{} max relative error {} (threshold {})",
        if passed { "PASS" } else { "FAIL" },
        fmt_sig9(report.max_rel_error()),
        fmt_sig9(threshold)
    )
    .map_err(io)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(
            &dir.join("gradcheck.json"),
            &json!({ "instance": spec, "threshold": threshold, "passed": passed, "report": report }),
        )?;
    }
    if passed {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check failed: max relative error {} is not below {}",
            fmt_sig9(report.max_rel_error()),
            fmt_sig9(threshold)
        ))
        .into())
    }
}

fn cmd_export(what: ExportKind, common: &Common, checkpoint: &Path) -> CliResult<()> {
    let cfg = resolve_config(common, Map::new())?;
    let head = read_checkpoint(checkpoint)?;
    let names = head.registry().names();
    let dir = &common.out_dir;
    let outputs: Vec<&str> = match what {
        ExportKind::Graph => {
            let graph = match (head.graph(), head.relation_params()) {
                (GraphMode::Dynamic, Some(rel)) => extract_graph(head.embeddings().matrix(), &rel)?,
                (GraphMode::Heuristic(g), _) => g.clone(),
                (other, _) => {
                    return Err(Error::Config(format!(
                        "head (mode {}, graph {}) has no class graph to export; use a dynamic or heuristic srr checkpoint",
                        head.mode(),
                        other.label()
                    ))
                    .into())
                }
            };
            create_dir(dir)?;
            write_file(&dir.join("graph.csv"), |w| write_labeled_csv(w, &names, &names, &graph))?;
            vec!["graph.csv"]
        }
        ExportKind::Correlate => {
            if head.mode() == HeadMode::Baseline {
                return Err(Error::Config("baseline heads carry no class embeddings to correlate".into()).into());
            }
            if head.registry().novel_indices().is_empty() {
                return Err(Error::Config(
                    "checkpoint has no novel classes; export a fine-tuned checkpoint".into(),
                )
                .into());
            }
            let maps = correlation_map(head.embeddings().matrix(), &head.effective_embeddings()?, head.registry())?;
            create_dir(dir)?;
            for (file, m) in [
                ("correlation_before.csv", &maps.before),
                ("correlation_after.csv", &maps.after),
                ("correlation_difference.csv", &maps.difference),
            ] {
                write_file(&dir.join(file), |w| write_labeled_csv(w, &maps.novel, &maps.base, m))?;
            }
            vec!["correlation_before.csv", "correlation_after.csv", "correlation_difference.csv"]
        }
    };
    let mut inputs = Map::new();
    inputs.insert("checkpoint".into(), json!(checkpoint.display().to_string()));
    let mut hashes = Map::new();
    hashes.insert("params".into(), json!(head.param_hash()));
    write_metadata(dir, "export", &cfg, inputs, &outputs, hashes)
}

struct ClosureArgs {
    edges: Option<PathBuf>,
    roots: Vec<String>,
    class: String,
    roots_file: Option<PathBuf>,
    golden: bool,
    only: Vec<String>,
    format: OutputFormat,
    out: Option<PathBuf>,
}

fn cmd_closure(args: ClosureArgs) -> CliResult<()> {
    let mut manifest = if args.golden {
        if args.edges.is_some() || !args.roots.is_empty() || args.roots_file.is_some() {
            return Err(CliError::Usage("--golden takes no edges or roots".into()));
        }
        RemovalManifest::golden()
    } else {
        let path = args.edges.as_ref().ok_or_else(|| CliError::Usage("--edges is required".into()))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let graph = parse_hypernym_edges(BufReader::new(file))?;
        let mut roots: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if let Some(rf) = &args.roots_file {
            let text = fs::read_to_string(rf).map_err(|e| Error::io(rf, e))?;
            let parsed = crate::wordnet::parse_text_manifest(&text, Provenance::Computed)?;
            roots.extend(parsed.classes);
        }
        if !args.roots.is_empty() {
            for r in &args.roots {
                if !crate::wordnet::is_synset_id(r) {
                    return Err(Error::Invalid(format!("malformed synset id `{r}`")).into());
                }
            }
            roots.insert(args.class.clone(), args.roots.clone());
        }
        if roots.is_empty() {
            return Err(CliError::Usage("give --roots or --roots-file".into()));
        }
        let mut m = RemovalManifest::new(Provenance::Computed);
        for (class, r) in &roots {
            m.insert(class, hyponym_closure(&graph, r)?);
        }
        m
    };
    if !args.only.is_empty() {
        for c in &args.only {
            if !manifest.classes.contains_key(c) {
                return Err(Error::UnknownClass(c.clone()).into());
            }
        }
        manifest.classes.retain(|c, _| args.only.contains(c));
    }
    let format = match args.format {
        OutputFormat::Text => ManifestFormat::Text,
        OutputFormat::Json => ManifestFormat::Json,
    };
    match &args.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            emit_removal_list(&manifest, format, &mut w)?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        None => emit_removal_list(&manifest, format, std::io::stdout().lock())?,
    }
    Ok(())
}
