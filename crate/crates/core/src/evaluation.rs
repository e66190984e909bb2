//! Top-1 accuracy reports, forgetting deltas, shot-sweep tables and paired
//! significance tests.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::FeatureRecord;
use crate::diffmath::Matrix;
use crate::embeddings::{name_key, ClassKind};
use crate::error::{Error, Result};
use crate::head::Head;
use crate::util::fmt_sig9;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub kind: ClassKind,
    pub count: usize,
    pub correct: usize,
    /// `None` when the class has no test records.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub accuracy: f64,
    /// Mean over base classes with test records (background excluded).
    pub mean_base_acc: Option<f64>,
    /// Mean over novel classes with test records.
    pub mean_novel_acc: Option<f64>,
    pub classes: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Builds a report from logits rows and true labels.
    pub fn from_logits(head: &Head, logits: &Matrix, labels: &[usize]) -> Result<Self> {
        let registry = head.registry();
        let n = registry.len();
        if labels.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty test set".into()));
        }
        let mut confusion = vec![vec![0usize; n]; n];
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::LabelOutOfRange { label: y, classes: n });
            }
            confusion[y][argmax(logits.row(i))] += 1;
        }
        let classes: Vec<ClassMetrics> = registry
            .entries()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let count: usize = confusion[i].iter().sum();
                let correct = confusion[i][i];
                ClassMetrics {
                    name: c.name.clone(),
                    kind: c.kind,
                    count,
                    correct,
                    accuracy: (count > 0).then(|| correct as f64 / count as f64),
                }
            })
            .collect();
        let correct: usize = classes.iter().map(|c| c.correct).sum();
        let by_kind = |kind| mean(classes.iter().filter(|c| c.kind == kind).filter_map(|c| c.accuracy));
        Ok(Self {
            records: labels.len(),
            accuracy: correct as f64 / labels.len() as f64,
            mean_base_acc: by_kind(ClassKind::Base),
            mean_novel_acc: by_kind(ClassKind::Novel),
            classes,
            confusion,
        })
    }

    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        let key = name_key(name);
        self.classes.iter().find(|c| name_key(&c.name) == key)
    }

    /// One row per class: `class,kind,count,correct,accuracy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "class,kind,count,correct,accuracy")?;
        for c in &self.classes {
            let kind = match c.kind {
                ClassKind::Base => "base",
                ClassKind::Novel => "novel",
                ClassKind::Background => "background",
            };
            let acc = c.accuracy.map(fmt_sig9).unwrap_or_default();
            writeln!(out, "{},{kind},{},{},{acc}", c.name, c.count, c.correct)?;
        }
        Ok(())
    }
}

/// Top-1 accuracy of `head` on `test_data`.
pub fn evaluate(head: &Head, test_data: &[FeatureRecord]) -> Result<MetricsReport> {
    if test_data.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty test set".into()));
    }
    let labels = test_data
        .iter()
        .map(|r| head.registry().index_of(&r.label))
        .collect::<Result<Vec<_>>>()?;
    let d_in = head.config().d_in;
    let mut x = Matrix::zeros(test_data.len(), d_in);
    for (i, r) in test_data.iter().enumerate() {
        r.validate(d_in)?;
        x.row_mut(i).copy_from_slice(&r.feat);
    }
    let logits = head.logits_batch(&x)?;
    MetricsReport::from_logits(head, &logits, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub name: String,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    pub classes: Vec<ClassDelta>,
    pub mean_delta: f64,
}

/// Per-base-class accuracy change from `before` to `after`.
pub fn forgetting_check(before: &MetricsReport, after: &MetricsReport) -> Result<ForgettingSummary> {
    let before_base: Vec<&ClassMetrics> = before.classes.iter().filter(|c| c.kind == ClassKind::Base).collect();
    let after_base = after.classes.iter().filter(|c| c.kind == ClassKind::Base).count();
    if before_base.len() != after_base {
        return Err(Error::Invalid(format!(
            "base class sets differ: {} before, {after_base} after",
            before_base.len()
        )));
    }
    let mut classes = Vec::new();
    for c in before_base {
        let a = after
            .class(&c.name)
            .filter(|a| a.kind == ClassKind::Base)
            .ok_or_else(|| Error::UnknownClass(c.name.clone()))?;
        let (Some(b), Some(a)) = (c.accuracy, a.accuracy) else {
            continue;
        };
        classes.push(ClassDelta {
            name: c.name.clone(),
            before: b,
            after: a,
            delta: a - b,
        });
    }
    let mean_delta = mean(classes.iter().map(|c| c.delta)).unwrap_or(0.0);
    Ok(ForgettingSummary { classes, mean_delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub k: usize,
    pub n: usize,
    pub base_mean: f64,
    pub base_std: f64,
    pub novel_mean: f64,
    pub novel_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

impl SweepTable {
    /// Rows sorted by `(k, seed)`.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by_key(|r| (r.k, r.seed));
        self
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,seed,base_acc,novel_acc")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.k, r.seed, fmt_sig9(r.base_acc), fmt_sig9(r.novel_acc))?;
        }
        Ok(())
    }

    /// Mean and sample standard deviation per k.
    pub fn summary(&self) -> Vec<SweepStats> {
        let mut by_k: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let e = by_k.entry(r.k).or_default();
            e.0.push(r.base_acc);
            e.1.push(r.novel_acc);
        }
        by_k.into_iter()
            .map(|(k, (b, n))| SweepStats {
                k,
                n: b.len(),
                base_mean: b.iter().sum::<f64>() / b.len() as f64,
                base_std: sample_std(&b),
                novel_mean: n.iter().sum::<f64>() / n.len() as f64,
                novel_std: sample_std(&n),
            })
            .collect()
    }

    pub fn novel_by_seed(&self, k: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.k == k).map(|r| r.novel_acc).collect()
    }
}

/// One-sided paired t-test of `H1: mean(a − b) > −margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub margin: f64,
    pub mean_diff: f64,
    pub std_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64], margin: f64) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "paired test needs two equal samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mean_diff = diffs.iter().sum::<f64>() / n as f64;
    let std_diff = sample_std(&diffs);
    let shifted = mean_diff + margin;
    let (t, p_value) = if std_diff == 0.0 {
        let p = match shifted.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        };
        (shifted.signum() * f64::INFINITY, p)
    } else {
        let t = shifted / (std_diff / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest {
        n,
        margin,
        mean_diff,
        std_diff,
        t,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn paired_test_known_values() {
        // Differences [1, 2, 3, 4]: mean 2.5, sd √(5/3), t = 2.5 / (sd / 2) = 3.872983...
        let t = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0], 0.0).unwrap();
        assert!((t.t - 3.872_983_346_207_417).abs() < 1e-12);
        // Upper tail of Student t with 3 dof, by 30-digit quadrature of the density.
        assert!((t.p_value - 0.015_233_145_831_085_5).abs() < 1e-12, "{}", t.p_value);
        let same = paired_t_test(&[1.0, 1.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(same.p_value, 0.5);
        assert!(paired_t_test(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn sweep_csv_and_summary() {
        let t = SweepTable {
            rows: vec![
                SweepRow { k: 2, seed: 0, base_acc: 0.5, novel_acc: 0.25 },
                SweepRow { k: 1, seed: 1, base_acc: 1.0, novel_acc: 0.5 },
                SweepRow { k: 1, seed: 0, base_acc: 0.0, novel_acc: 0.5 },
            ],
        }
        .sorted();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,seed,base_acc,novel_acc\n1,0,0,0.5\n1,1,1,0.5\n2,0,0.5,0.25\n");
        let s = t.summary();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].base_mean, 0.5);
        assert!((s[0].base_std - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].novel_std, 0.0);
    }
}
