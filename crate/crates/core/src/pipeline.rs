//! End-to-end runs: data preparation, base training, per-k fine-tuning and
//! evaluation, and seed-parallel shot sweeps.

use std::fs::File;
use std::io::BufReader;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{read_records, FeatureRecord};
use crate::diffmath::Matrix;
use crate::embeddings::{parse_embedding_file, ClassKind, ClassRegistry, EmbeddingMatrix, RegistryFile};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport, SweepRow, SweepTable};
use crate::head::{build_head, GraphKind, Head, HeadMode};
use crate::relation::{cooccurrence_graph, parse_label_sets};
use crate::synthgen::{clustered_embeddings, cooccurrence_label_sets, generate, SynthConfig};
use crate::training::{base_train, finetune, sample_episode, Episode, EpisodeConfig, LossTrace};
use crate::util;

pub const VOC_BASE: [&str; 15] = [
    "aeroplane",
    "bicycle",
    "boat",
    "bottle",
    "car",
    "cat",
    "chair",
    "diningtable",
    "dog",
    "horse",
    "person",
    "pottedplant",
    "sheep",
    "train",
    "tvmonitor",
];
pub const VOC_NOVEL: [&str; 5] = ["bird", "bus", "cow", "motorbike", "sofa"];

pub fn voc_registry() -> ClassRegistry {
    ClassRegistry::new(&VOC_BASE, &VOC_NOVEL).expect("VOC split is a valid partition")
}

/// Everything a run needs, in full-registry order.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub registry: ClassRegistry,
    pub embeddings: EmbeddingMatrix,
    /// Base and background training records.
    pub base_train: Vec<FeatureRecord>,
    /// Novel training records (the shot pool).
    pub novel_train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
    pub label_sets: Vec<Vec<String>>,
}

fn open(path: &str) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn load_registry(path: &str) -> Result<ClassRegistry> {
    let file: RegistryFile = serde_json::from_reader(open(path)?)?;
    ClassRegistry::from_file(&file)
}

pub fn load_records(path: &str) -> Result<Vec<FeatureRecord>> {
    read_records(open(path)?)
}

/// Loads files named in `cfg.data` and `cfg.embeddings`, generating
/// whatever is absent from `seed`.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let registry = match &cfg.data.registry {
        Some(p) => load_registry(p)?,
        None => voc_registry(),
    };
    let embeddings = match &cfg.embeddings.path {
        Some(p) => parse_embedding_file(open(p)?, &registry, cfg.embeddings.background_seed)?,
        None => clustered_embeddings(
            &registry,
            cfg.embeddings.dim,
            cfg.embeddings.latent_dim,
            cfg.embeddings.jitter,
            util::derive_seed(seed, "embeddings", 0),
            cfg.embeddings.background_seed,
        )?,
    };
    let (train, test) = match (&cfg.data.train, &cfg.data.test) {
        (Some(tr), Some(te)) => (load_records(tr)?, load_records(te)?),
        (None, None) => {
            let synth = SynthConfig {
                seed: util::derive_seed(seed, "synth", 0),
                ..cfg.synth.clone()
            };
            let data = generate(&embeddings, &registry, &synth)?;
            (data.train, data.test)
        }
        _ => return Err(Error::Config("data.train and data.test must be given together".into())),
    };
    let mut base_train = Vec::new();
    let mut novel_train = Vec::new();
    for r in train {
        match registry.entry(registry.index_of(&r.label)?).kind {
            ClassKind::Novel => novel_train.push(r),
            _ => base_train.push(r),
        }
    }
    let label_sets = match &cfg.data.cooccurrence {
        Some(p) => parse_label_sets(open(p)?)?,
        None => cooccurrence_label_sets(
            &embeddings,
            &registry,
            cfg.data.cooccurrence_images,
            util::derive_seed(seed, "cooccurrence", 0),
        ),
    };
    Ok(Prepared {
        registry,
        embeddings,
        base_train,
        novel_train,
        test,
        label_sets,
    })
}

/// Co-occurrence graph over `registry`, ignoring labels outside it.
pub fn graph_for(label_sets: &[Vec<String>], registry: &ClassRegistry) -> Result<Matrix> {
    let kept: Vec<Vec<&str>> = label_sets
        .iter()
        .map(|s| s.iter().map(String::as_str).filter(|l| registry.contains(l)).collect())
        .collect();
    cooccurrence_graph(&kept, registry)
}

/// Builds and base-trains a head on base and background classes.
pub fn train_base_head(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<(Head, LossTrace)> {
    let base = prep.registry.base_only();
    let we = prep.embeddings.for_registry(&base)?;
    let mut head_cfg = cfg.head.clone();
    let mut heuristic = None;
    if head_cfg.mode == HeadMode::Srr && !cfg.graph_in_base {
        head_cfg.mode = HeadMode::Ssp;
        head_cfg.graph = GraphKind::None;
    } else if head_cfg.graph == GraphKind::Heuristic {
        heuristic = Some(graph_for(&prep.label_sets, &base)?);
    }
    let head = build_head(&head_cfg, &base, &we, heuristic, util::derive_seed(seed, "head", 0))?;
    base_train(&head, &prep.base_train, &cfg.train, util::derive_seed(seed, "base", 0))
}

/// Expands a base head to the full registry, attaches the configured graph
/// and trunk split, then fine-tunes on a k-shot episode.
pub fn finetune_k(
    cfg: &RunConfig,
    prep: &Prepared,
    base_head: &Head,
    k: usize,
    seed: u64,
) -> Result<(Head, Episode, LossTrace)> {
    let mut head = base_head.expand_to(&prep.registry, &prep.embeddings, util::derive_seed(seed, "expand", 0))?;
    let want = cfg.head.graph;
    let switch = cfg.head.mode == HeadMode::Srr
        && (head.mode() != HeadMode::Srr || head.config().graph != want || want == GraphKind::Heuristic);
    if switch {
        let graph = (cfg.head.graph == GraphKind::Heuristic)
            .then(|| graph_for(&prep.label_sets, &prep.registry))
            .transpose()?;
        head = head.with_graph(cfg.head.graph, graph, util::derive_seed(seed, "relation", 0))?;
    }
    if cfg.decouple {
        head = head.decoupled();
    }
    let ep_cfg = EpisodeConfig {
        k,
        seed: util::derive_seed(seed, "episode", 0),
        ..cfg.episode.clone()
    };
    let episode = sample_episode(&prep.base_train, &prep.novel_train, &prep.registry, &ep_cfg)?;
    let (head, trace) = finetune(&head, &episode, &cfg.finetune, util::derive_seed(seed, "finetune", 0))?;
    Ok((head, episode, trace))
}

#[derive(Debug, Clone, Serialize)]
pub struct KOutcome {
    pub k: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Base head on base and background test records.
    pub base_report: MetricsReport,
    pub per_k: Vec<KOutcome>,
}

fn base_test(prep: &Prepared) -> Vec<FeatureRecord> {
    let base = prep.registry.base_only();
    prep.test.iter().filter(|r| base.contains(&r.label)).cloned().collect()
}

/// One base training followed by a fine-tune and evaluation per k.
pub fn run_seed(cfg: &RunConfig, shots: &[usize], seed: u64) -> Result<SeedRun> {
    let wrap = |k: usize| move |e: Error| Error::Run { seed, k, source: Box::new(e) };
    let prep = prepare(cfg, seed).map_err(wrap(0))?;
    let (base_head, _) = train_base_head(cfg, &prep, seed).map_err(wrap(0))?;
    let base_report = evaluate(&base_head, &base_test(&prep)).map_err(wrap(0))?;
    let per_k = shots
        .iter()
        .map(|&k| {
            let (head, _, _) = finetune_k(cfg, &prep, &base_head, k, seed).map_err(wrap(k))?;
            let report = evaluate(&head, &prep.test).map_err(wrap(k))?;
            Ok(KOutcome { k, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed,
        base_report,
        per_k,
    })
}

pub fn run_seeds(cfg: &RunConfig, shots: &[usize], seeds: &[u64]) -> Result<Vec<SeedRun>> {
    seeds.par_iter().map(|&s| run_seed(cfg, shots, s)).collect()
}

/// Consecutive seeds starting at the configured one.
pub fn seed_list(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect()
}

/// Table of `(k, seed, base accuracy, novel accuracy)` after fine-tuning.
pub fn shot_sweep(cfg: &RunConfig, shots: &[usize], seeds: &[u64]) -> Result<SweepTable> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(Error::Config("shot list and seed list must be non-empty".into()));
    }
    let runs = run_seeds(cfg, shots, seeds)?;
    let rows = runs
        .iter()
        .flat_map(|r| {
            r.per_k.iter().map(move |o| SweepRow {
                k: o.k,
                seed: r.seed,
                base_acc: o.report.mean_base_acc.unwrap_or(f64::NAN),
                novel_acc: o.report.mean_novel_acc.unwrap_or(f64::NAN),
            })
        })
        .collect();
    Ok(SweepTable { rows }.sorted())
}
