//! Hypernym graphs over WordNet synset ids, hyponym closures and removal
//! manifests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class removal lists for the VOC novel categories, one
/// `class: id, id, ...` line each.
pub const VOC_REMOVAL_FIXTURE: &str = include_str!("../data/voc_removal.txt");

/// `n` followed by exactly eight digits.
pub fn is_synset_id(s: &str) -> bool {
    s.len() == 9 && s.starts_with('n') && s[1..].bytes().all(|b| b.is_ascii_digit())
}

fn check_id(id: &str, line: usize) -> Result<()> {
    if is_synset_id(id) {
        Ok(())
    } else {
        Err(Error::Parse {
            line,
            msg: format!("malformed synset id `{id}`"),
        })
    }
}

/// Directed hypernym → hyponym edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordNetGraph {
    children: BTreeMap<String, BTreeSet<String>>,
}

impl WordNetGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edge; duplicates collapse, self-edges are rejected.
    pub fn add_edge(&mut self, hypernym: &str, hyponym: &str) -> Result<()> {
        for id in [hypernym, hyponym] {
            if !is_synset_id(id) {
                return Err(Error::Invalid(format!("malformed synset id `{id}`")));
            }
        }
        if hypernym == hyponym {
            return Err(Error::Invalid(format!("self-edge on `{hypernym}`")));
        }
        self.children.entry(hyponym.to_string()).or_default();
        self.children
            .entry(hypernym.to_string())
            .or_default()
            .insert(hyponym.to_string());
        Ok(())
    }

    pub fn add_node(&mut self, id: &str) -> Result<()> {
        if !is_synset_id(id) {
            return Err(Error::Invalid(format!("malformed synset id `{id}`")));
        }
        self.children.entry(id.to_string()).or_default();
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.children.len()
    }

    pub fn edge_count(&self) -> usize {
        self.children.values().map(BTreeSet::len).sum()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.children.contains_key(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.children.keys().map(String::as_str)
    }

    pub fn hyponyms(&self, id: &str) -> impl Iterator<Item = &str> {
        self.children.get(id).into_iter().flatten().map(String::as_str)
    }

    /// Nodes that lie on a directed cycle, sorted.
    pub fn cycle_nodes(&self) -> Vec<String> {
        self.nodes()
            .filter(|n| {
                self.hyponyms(n).any(|c| {
                    hyponym_closure(self, &[c])
                        .map(|reach| reach.contains(*n))
                        .unwrap_or(false)
                })
            })
            .map(str::to_string)
            .collect()
    }
}

/// Reads `hypernym<TAB>hyponym` lines; `#` lines and blank lines are skipped.
pub fn parse_hypernym_edges<R: BufRead>(stream: R) -> Result<WordNetGraph> {
    let mut g = WordNetGraph::new();
    for (i, line) in stream.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected `hypernym<TAB>hyponym`, got {} field(s)", fields.len()),
            });
        }
        check_id(fields[0], n)?;
        check_id(fields[1], n)?;
        g.add_edge(fields[0], fields[1]).map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
    }
    Ok(g)
}

/// Roots plus everything reachable through hyponym edges, sorted.
/// Terminates on cyclic input.
pub fn hyponym_closure<S: AsRef<str>>(graph: &WordNetGraph, roots: &[S]) -> Result<BTreeSet<String>> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::new();
    for r in roots {
        let r = r.as_ref();
        if !graph.contains(r) {
            return Err(Error::UnknownSynset(r.to_string()));
        }
        if seen.insert(r.to_string()) {
            queue.push_back(r.to_string());
        }
    }
    while let Some(n) = queue.pop_front() {
        for c in graph.hyponyms(&n) {
            if seen.insert(c.to_string()) {
                queue.push_back(c.to_string());
            }
        }
    }
    Ok(seen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Computed,
    BundledGolden,
}

/// Class name → sorted, duplicate-free synset ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalManifest {
    pub provenance: Provenance,
    pub classes: BTreeMap<String, Vec<String>>,
}

impl RemovalManifest {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            classes: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, class: &str, ids: impl IntoIterator<Item = String>) {
        let set: BTreeSet<String> = ids.into_iter().collect();
        self.classes.insert(class.to_string(), set.into_iter().collect());
    }

    /// Closure of each class's roots.
    pub fn computed<S: AsRef<str>>(graph: &WordNetGraph, roots: &BTreeMap<String, Vec<S>>) -> Result<Self> {
        let mut m = Self::new(Provenance::Computed);
        for (class, r) in roots {
            m.insert(class, hyponym_closure(graph, r)?);
        }
        Ok(m)
    }

    /// The bundled VOC lists.
    pub fn golden() -> Self {
        parse_text_manifest(VOC_REMOVAL_FIXTURE, Provenance::BundledGolden).expect("bundled fixture parses")
    }

    pub fn line(&self, class: &str) -> Option<String> {
        self.classes.get(class).map(|ids| format!("{class}: {}", ids.join(", ")))
    }
}

/// Parses `class: id, id, ...` lines.
pub fn parse_text_manifest(text: &str, provenance: Provenance) -> Result<RemovalManifest> {
    let mut m = RemovalManifest::new(provenance);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (class, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected `class: id, id, ...`".into(),
        })?;
        let ids: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        for id in &ids {
            check_id(id, i + 1)?;
        }
        m.insert(class.trim(), ids);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    Text,
    Json,
}

/// Text: one `class: id, id, ...` line per class in name order. JSON: the
/// manifest document.
pub fn emit_removal_list<W: Write>(manifest: &RemovalManifest, format: ManifestFormat, mut out: W) -> Result<()> {
    let io = |e| Error::io("<manifest>", e);
    match format {
        ManifestFormat::Text => {
            for class in manifest.classes.keys() {
                writeln!(out, "{}", manifest.line(class).expect("class present")).map_err(io)?;
            }
        }
        ManifestFormat::Json => {
            serde_json::to_writer_pretty(&mut out, manifest)?;
            writeln!(out).map_err(io)?;
        }
    }
    Ok(())
}
