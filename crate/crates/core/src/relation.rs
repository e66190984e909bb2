//! Relation reasoning over class embeddings.
//!
//! The dynamic graph is a self-attention map over the rows of `Wₑ`:
//!
//! ```text
//! G   = softmax_rows((Wₑ T_f)(Wₑ T_g)ᵀ / s)       s = √r when scaling is on
//! Wₑ' = G (Wₑ T_h) T_l + Wₑ
//! ```
//!
//! The ablation alternatives are a fixed co-occurrence graph and a
//! per-row transform `Wₑ T_h T_l + Wₑ` with no cross-class mixing.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{cosine, Matrix, Tape, Var};
use crate::embeddings::{ClassKind, ClassRegistry};
use crate::error::{Error, Result};
use crate::util::fmt_sig9;

pub const DEFAULT_REDUCED_DIM: usize = 32;
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationParams {
    /// `dₑ x r`
    pub t_f: Matrix,
    /// `dₑ x r`
    pub t_g: Matrix,
    /// `dₑ x r`
    pub t_h: Matrix,
    /// `r x dₑ`; zero at initialization so the module starts as identity.
    pub t_l: Matrix,
    /// Divide attention logits by `√r`.
    pub scale_attention: bool,
}

impl RelationParams {
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, reduced_dim: usize, scale_attention: bool, rng: &mut R) -> Result<Self> {
        if reduced_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("relation dimensions must be at least 1".into()));
        }
        Ok(Self {
            t_f: Matrix::randn(embed_dim, reduced_dim, INIT_STD, rng),
            t_g: Matrix::randn(embed_dim, reduced_dim, INIT_STD, rng),
            t_h: Matrix::randn(embed_dim, reduced_dim, INIT_STD, rng),
            t_l: Matrix::zeros(reduced_dim, embed_dim),
            scale_attention,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.t_f.rows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.t_f.cols()
    }

    pub fn attention_scale(&self) -> f64 {
        if self.scale_attention {
            1.0 / (self.reduced_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    fn validate(&self, we: &Matrix) -> Result<()> {
        let (de, r) = self.t_f.shape();
        let expect = [
            ("t_g", &self.t_g, (de, r)),
            ("t_h", &self.t_h, (de, r)),
            ("t_l", &self.t_l, (r, de)),
        ];
        for (_, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Shape {
                    op: "relation params",
                    left: m.shape(),
                    right: shape,
                });
            }
        }
        if we.cols() != de {
            return Err(Error::Shape {
                op: "relation",
                left: we.shape(),
                right: self.t_f.shape(),
            });
        }
        Ok(())
    }
}

/// Which refinement (if any) is applied to `Wₑ` before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "graph")]
pub enum GraphMode {
    None,
    Dynamic,
    /// Row-stochastic, nonnegative `N x N` adjacency.
    Heuristic(Matrix),
    TrainableTransform,
}

impl GraphMode {
    pub fn label(&self) -> &'static str {
        match self {
            GraphMode::None => "none",
            GraphMode::Dynamic => "dynamic",
            GraphMode::Heuristic(_) => "heuristic",
            GraphMode::TrainableTransform => "tt",
        }
    }

    pub fn heuristic(graph: Matrix) -> Result<Self> {
        if graph.rows() != graph.cols() {
            return Err(Error::Shape {
                op: "heuristic graph",
                left: graph.shape(),
                right: (graph.rows(), graph.rows()),
            });
        }
        for r in 0..graph.rows() {
            let row = graph.row(r);
            if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("heuristic graph row {r} is not a distribution")));
            }
        }
        Ok(GraphMode::Heuristic(graph))
    }
}

/// Ascending-order sum, so the result does not depend on how the
/// values were permuted.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn softmax_rows_ordered(m: &Matrix) -> Result<Matrix> {
    m.ensure_finite("row_softmax")?;
    let mut out = m.clone();
    let mut scratch = Vec::with_capacity(m.cols());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        scratch.clear();
        scratch.extend_from_slice(row);
        let total = ordered_sum(&mut scratch);
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// `graph · h`, reducing over the class axis with [`ordered_sum`].
fn mix_classes(graph: &Matrix, h: &Matrix) -> Matrix {
    let (n, c) = (graph.rows(), h.cols());
    let mut out = Matrix::zeros(n, c);
    let mut terms = vec![0.0; h.rows()];
    for i in 0..n {
        let g = graph.row(i);
        for col in 0..c {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = g[j] * h.get(j, col);
            }
            out.set(i, col, ordered_sum(&mut terms));
        }
    }
    out
}

/// `softmax_rows(Wₑ T_f T_gᵀ Wₑᵀ · scale)`. Reductions over the class axis
/// are order-independent, so permuting the rows of `Wₑ` permutes the graph
/// exactly.
pub fn extract_graph(we: &Matrix, p: &RelationParams) -> Result<Matrix> {
    p.validate(we)?;
    let f = we.matmul(&p.t_f)?;
    let g = we.matmul(&p.t_g)?;
    softmax_rows_ordered(&f.matmul(&g.transpose())?.scale(p.attention_scale()))
}

/// `G Wₑ T_h T_l + Wₑ`, exactly permutation-equivariant over classes.
pub fn relation_forward(we: &Matrix, p: &RelationParams) -> Result<Matrix> {
    let graph = extract_graph(we, p)?;
    let h = we.matmul(&p.t_h)?;
    mix_classes(&graph, &h).matmul(&p.t_l)?.add(we)
}

/// `Wₑ T_h T_l + Wₑ`, each row transformed independently.
pub fn trainable_transform(we: &Matrix, p: &RelationParams) -> Result<Matrix> {
    p.validate(we)?;
    we.matmul(&p.t_h)?.matmul(&p.t_l)?.add(we)
}

/// Tape handles for the four relation maps.
#[derive(Debug, Clone, Copy)]
pub struct RelationVars {
    pub t_f: Var,
    pub t_g: Var,
    pub t_h: Var,
    pub t_l: Var,
}

pub fn relation_forward_on_tape(tape: &mut Tape, we: Var, p: RelationVars, scale: f64) -> Result<Var> {
    let f = tape.matmul(we, p.t_f)?;
    let g = tape.matmul(we, p.t_g)?;
    let gt = tape.transpose(g);
    let mut logits = tape.matmul(f, gt)?;
    if scale != 1.0 {
        logits = tape.scale(logits, scale);
    }
    let graph = tape.row_softmax(logits)?;
    let h = tape.matmul(we, p.t_h)?;
    let mixed = tape.matmul(graph, h)?;
    let out = tape.matmul(mixed, p.t_l)?;
    tape.add(out, we)
}

pub fn trainable_transform_on_tape(tape: &mut Tape, we: Var, p: RelationVars) -> Result<Var> {
    let h = tape.matmul(we, p.t_h)?;
    let out = tape.matmul(h, p.t_l)?;
    tape.add(out, we)
}

/// Co-occurrence adjacency: `C[i][j]` counts label sets holding both `i`
/// and `j` (`C[i][i]` counts sets holding `i`), then rows are normalized.
/// Classes that never occur get a self-loop.
pub fn cooccurrence_graph<S: AsRef<str>>(label_sets: &[Vec<S>], registry: &ClassRegistry) -> Result<Matrix> {
    let n = registry.len();
    let mut counts = Matrix::zeros(n, n);
    for set in label_sets {
        let mut idx = set
            .iter()
            .map(|l| registry.index_of(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        for &i in &idx {
            for &j in &idx {
                let v = counts.get(i, j);
                counts.set(i, j, v + 1.0);
            }
        }
    }
    for r in 0..n {
        let total: f64 = counts.row(r).iter().sum();
        if total == 0.0 {
            counts.set(r, r, 1.0);
        } else {
            for v in counts.row_mut(r) {
                *v /= total;
            }
        }
    }
    Ok(counts)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSetLine {
    labels: Vec<String>,
}

/// Reads `{"labels": [...]}` JSON lines; blank lines are skipped.
pub fn parse_label_sets<R: BufRead>(stream: R) -> Result<Vec<Vec<String>>> {
    let mut sets = Vec::new();
    for (i, line) in stream.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelSetLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        sets.push(parsed.labels);
    }
    Ok(sets)
}

/// Novel-by-base cosine tables before and after refinement.
#[derive(Debug, Clone, Serialize)]
pub struct CorrelationMaps {
    pub novel: Vec<String>,
    pub base: Vec<String>,
    pub before: Matrix,
    pub after: Matrix,
    pub difference: Matrix,
}

pub fn correlation_map(before: &Matrix, after: &Matrix, registry: &ClassRegistry) -> Result<CorrelationMaps> {
    if before.shape() != after.shape() || before.rows() != registry.len() {
        return Err(Error::Shape {
            op: "correlation_map",
            left: before.shape(),
            right: after.shape(),
        });
    }
    let novel = registry.indices_of(ClassKind::Novel);
    let base = registry.indices_of(ClassKind::Base);
    let table = |m: &Matrix| {
        let mut t = Matrix::zeros(novel.len(), base.len());
        for (i, &n) in novel.iter().enumerate() {
            for (j, &b) in base.iter().enumerate() {
                t.set(i, j, cosine(m.row(n), m.row(b)));
            }
        }
        t
    };
    let b = table(before);
    let a = table(after);
    let difference = a.sub(&b)?;
    Ok(CorrelationMaps {
        novel: novel.iter().map(|&i| registry.entry(i).name.clone()).collect(),
        base: base.iter().map(|&i| registry.entry(i).name.clone()).collect(),
        before: b,
        after: a,
        difference,
    })
}

/// CSV with a header row of column names and a leading name column.
pub fn write_labeled_csv<W: Write>(mut out: W, rows: &[String], cols: &[String], m: &Matrix) -> std::io::Result<()> {
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    write!(out, "class")?;
    for c in cols {
        write!(out, ",{}", quote(c))?;
    }
    writeln!(out)?;
    for (r, name) in rows.iter().enumerate() {
        write!(out, "{}", quote(name))?;
        for v in m.row(r) {
            write!(out, ",{}", fmt_sig9(*v))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
