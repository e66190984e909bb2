//! Class registry and fixed class word-embedding matrices.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{l2_norm, Matrix};
use crate::error::{Error, Result};
use crate::util;

pub const DEFAULT_EMBEDDING_DIM: usize = 300;
pub const DEFAULT_BACKGROUND_NAME: &str = "background";
pub const DEFAULT_BACKGROUND_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Base,
    Novel,
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub kind: ClassKind,
    pub tokens: Vec<String>,
}

/// Ordered classes: base classes, then novel classes, then one background slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: Vec<ClassEntry>,
}

/// On-disk registry: `{"base": [...], "novel": [...], "background": "...", "tokens": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryFile {
    pub base: Vec<String>,
    #[serde(default)]
    pub novel: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub tokens: IndexMap<String, Vec<String>>,
}

pub fn name_key(name: &str) -> String {
    name.trim().to_lowercase()
}

fn default_tokens(name: &str) -> Vec<String> {
    name.split_whitespace().map(str::to_string).collect()
}

impl ClassRegistry {
    pub fn new<S: AsRef<str>>(base: &[S], novel: &[S]) -> Result<Self> {
        Self::with_background(base, novel, DEFAULT_BACKGROUND_NAME)
    }

    pub fn with_background<S: AsRef<str>>(base: &[S], novel: &[S], background: &str) -> Result<Self> {
        let base_keys: HashSet<String> = base.iter().map(|s| name_key(s.as_ref())).collect();
        if let Some(n) = novel.iter().find(|n| base_keys.contains(&name_key(n.as_ref()))) {
            return Err(Error::OverlappingPartition(n.as_ref().trim().to_string()));
        }
        let mut classes = Vec::with_capacity(base.len() + novel.len() + 1);
        let parts = base
            .iter()
            .map(|s| (s.as_ref(), ClassKind::Base))
            .chain(novel.iter().map(|s| (s.as_ref(), ClassKind::Novel)))
            .chain(std::iter::once((background, ClassKind::Background)));
        let mut seen = HashSet::new();
        for (name, kind) in parts {
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Invalid("empty class name".into()));
            }
            if !seen.insert(name_key(name)) {
                return Err(Error::DuplicateClass(name.to_string()));
            }
            classes.push(ClassEntry {
                name: name.to_string(),
                kind,
                tokens: default_tokens(name),
            });
        }
        Ok(Self { classes })
    }

    /// Replaces the token lists of the named classes.
    pub fn with_token_overrides(mut self, overrides: &IndexMap<String, Vec<String>>) -> Result<Self> {
        for (name, tokens) in overrides {
            let idx = self.index_of(name)?;
            if tokens.is_empty() {
                return Err(Error::Invalid(format!("class `{name}` maps to no tokens")));
            }
            self.classes[idx].tokens = tokens.clone();
        }
        Ok(self)
    }

    pub fn from_file(spec: &RegistryFile) -> Result<Self> {
        let reg = Self::with_background(
            &spec.base,
            &spec.novel,
            spec.background.as_deref().unwrap_or(DEFAULT_BACKGROUND_NAME),
        )?;
        reg.with_token_overrides(&spec.tokens)
    }

    pub fn to_file(&self) -> RegistryFile {
        let names = |k| {
            self.classes
                .iter()
                .filter(|c| c.kind == k)
                .map(|c| c.name.clone())
                .collect::<Vec<_>>()
        };
        let tokens = self
            .classes
            .iter()
            .filter(|c| c.tokens != default_tokens(&c.name))
            .map(|c| (c.name.clone(), c.tokens.clone()))
            .collect();
        RegistryFile {
            base: names(ClassKind::Base),
            novel: names(ClassKind::Novel),
            background: Some(self.background().name.clone()),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn entry(&self, idx: usize) -> &ClassEntry {
        &self.classes[idx]
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        let key = name_key(name);
        self.classes
            .iter()
            .position(|c| name_key(&c.name) == key)
            .ok_or_else(|| Error::UnknownClass(name.trim().to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_ok()
    }

    pub fn background_index(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn background(&self) -> &ClassEntry {
        &self.classes[self.background_index()]
    }

    pub fn indices_of(&self, kind: ClassKind) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| self.classes[i].kind == kind)
            .collect()
    }

    pub fn base_indices(&self) -> Vec<usize> {
        self.indices_of(ClassKind::Base)
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        self.indices_of(ClassKind::Novel)
    }

    /// The base classes plus background; the registry used for base training.
    pub fn base_only(&self) -> ClassRegistry {
        let classes = self
            .classes
            .iter()
            .filter(|c| c.kind != ClassKind::Novel)
            .cloned()
            .collect();
        ClassRegistry { classes }
    }

    /// Appends novel classes before the background slot.
    pub fn expanded(&self, novel: &[ClassEntry]) -> Result<ClassRegistry> {
        let mut classes = self.classes.clone();
        let bg = classes.pop().expect("registry has a background slot");
        let mut seen: HashSet<String> = classes.iter().map(|c| name_key(&c.name)).collect();
        seen.insert(name_key(&bg.name));
        for c in novel {
            if !seen.insert(name_key(&c.name)) {
                return Err(Error::DuplicateClass(c.name.clone()));
            }
            classes.push(ClassEntry {
                kind: ClassKind::Novel,
                ..c.clone()
            });
        }
        classes.push(bg);
        Ok(ClassRegistry { classes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source", content = "tokens")]
pub enum RowSource {
    Tokens(Vec<String>),
    Random,
    Background,
}

/// `N x dₑ` matrix of unit-norm class embeddings, in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    names: Vec<String>,
    sources: Vec<RowSource>,
    matrix: Matrix,
}

impl EmbeddingMatrix {
    pub fn from_parts(names: Vec<String>, sources: Vec<RowSource>, matrix: Matrix) -> Result<Self> {
        if names.len() != matrix.rows() || sources.len() != matrix.rows() {
            return Err(Error::Shape {
                op: "EmbeddingMatrix::from_parts",
                left: matrix.shape(),
                right: (names.len(), sources.len()),
            });
        }
        let matrix = matrix.l2_normalize_rows()?;
        Ok(Self {
            names,
            sources,
            matrix,
        })
    }

    /// Trusts that every row of `matrix` is already unit-norm.
    pub(crate) fn from_normalized(names: Vec<String>, sources: Vec<RowSource>, matrix: Matrix) -> Self {
        debug_assert_eq!(names.len(), matrix.rows());
        Self {
            names,
            sources,
            matrix,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn sources(&self) -> &[RowSource] {
        &self.sources
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn content_hash(&self) -> String {
        self.matrix.content_hash()
    }

    pub fn row_of(&self, name: &str) -> Result<&[f64]> {
        let key = name_key(name);
        let idx = self
            .names
            .iter()
            .position(|n| name_key(n) == key)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))?;
        Ok(self.matrix.row(idx))
    }

    /// Rows re-ordered to match `registry`.
    pub fn for_registry(&self, registry: &ClassRegistry) -> Result<EmbeddingMatrix> {
        let mut idx = Vec::with_capacity(registry.len());
        for c in registry.entries() {
            let key = name_key(&c.name);
            let i = self
                .names
                .iter()
                .position(|n| name_key(n) == key)
                .ok_or_else(|| Error::UnknownClass(c.name.clone()))?;
            idx.push(i);
        }
        Ok(EmbeddingMatrix {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            sources: idx.iter().map(|&i| self.sources[i].clone()).collect(),
            matrix: self.matrix.select_rows(&idx),
        })
    }

    pub fn matches_registry(&self, registry: &ClassRegistry) -> bool {
        self.names.len() == registry.len()
            && self
                .names
                .iter()
                .zip(registry.entries())
                .all(|(n, c)| name_key(n) == name_key(&c.name))
    }

    /// Writes one word2vec text line per row, using each class's first token
    /// (or its name with spaces replaced by `_`).
    pub fn write_word2vec<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim())?;
        for (r, name) in self.names.iter().enumerate() {
            let token: String = name.split_whitespace().collect::<Vec<_>>().join("_");
            write!(out, "{token}")?;
            for v in self.matrix.row(r) {
                write!(out, " {v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Fixed, seeded unit-norm random row for the background class.
pub fn compose_background_row(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::rng(seed, "background-embedding", dim as u64);
    loop {
        let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = l2_norm(&row);
        if norm >= 1e-12 {
            return row.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Standard-normal rows normalized to unit length; background via
/// [`compose_background_row`].
pub fn random_embeddings(registry: &ClassRegistry, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Invalid("embedding dimension must be at least 1".into()));
    }
    let mut rng = util::rng(seed, "random-embeddings", dim as u64);
    let mut rows = Vec::with_capacity(registry.len());
    let mut sources = Vec::with_capacity(registry.len());
    for c in registry.entries() {
        if c.kind == ClassKind::Background {
            rows.push(compose_background_row(dim, seed));
            sources.push(RowSource::Background);
        } else {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            rows.push(row);
            sources.push(RowSource::Random);
        }
    }
    EmbeddingMatrix::from_parts(registry.names(), sources, Matrix::from_rows(&rows)?)
}

/// Reads a word2vec text file and builds one row per registry class: the
/// mean of the class's token vectors, L2-normalized. The background row is
/// [`compose_background_row`] with `background_seed`.
pub fn parse_embedding_file<R: BufRead>(
    stream: R,
    registry: &ClassRegistry,
    background_seed: u64,
) -> Result<EmbeddingMatrix> {
    let wanted: HashSet<String> = registry
        .entries()
        .iter()
        .filter(|c| c.kind != ClassKind::Background)
        .flat_map(|c| c.tokens.iter().flat_map(|t| [t.clone(), t.to_lowercase()]))
        .collect();

    let mut lines = stream.lines().enumerate();
    let (vocab, dim) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header `<vocab_count> <dim>`".into(),
            });
        };
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((v, d)) if d > 0 => break (v, d),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("bad header `{line}`, expected `<vocab_count> <dim>`"),
                })
            }
        }
    };

    let mut exact: HashMap<String, Vec<f64>> = HashMap::new();
    let mut folded: HashMap<String, Vec<f64>> = HashMap::new();
    let mut count = 0usize;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        count += 1;
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("token `{token}` has {} values, header declares {dim}", values.len()),
            });
        }
        let lower = token.to_lowercase();
        let keep_exact = wanted.contains(token);
        let keep_folded = wanted.contains(&lower) && !folded.contains_key(&lower);
        if !keep_exact && !keep_folded {
            continue;
        }
        let vector = values
            .iter()
            .map(|v| {
                v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("bad value `{v}` for token `{token}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if keep_folded {
            folded.insert(lower, vector.clone());
        }
        if keep_exact {
            exact.entry(token.to_string()).or_insert(vector);
        }
    }
    if count != vocab {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header declares {vocab} tokens but file has {count}"),
        });
    }

    let mut rows = Vec::with_capacity(registry.len());
    let mut sources = Vec::with_capacity(registry.len());
    for c in registry.entries() {
        if c.kind == ClassKind::Background {
            rows.push(compose_background_row(dim, background_seed));
            sources.push(RowSource::Background);
            continue;
        }
        let mut mean = vec![0.0; dim];
        for t in &c.tokens {
            let v = exact
                .get(t)
                .or_else(|| folded.get(&t.to_lowercase()))
                .ok_or_else(|| Error::MissingToken {
                    class: c.name.clone(),
                    token: t.clone(),
                })?;
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / c.tokens.len() as f64;
            }
        }
        if l2_norm(&mean) < 1e-12 {
            return Err(Error::Invalid(format!(
                "class `{}` has a zero embedding vector",
                c.name
            )));
        }
        rows.push(mean);
        sources.push(RowSource::Tokens(c.tokens.clone()));
    }
    EmbeddingMatrix::from_parts(registry.names(), sources, Matrix::from_rows(&rows)?)
}
