//! Feature records and their JSON-lines encoding.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::diffmath::Matrix;
use crate::embeddings::ClassRegistry;
use crate::error::{Error, Result};

pub const REG_DIM: usize = 4;

/// One pre-extracted feature vector with its class label and an optional
/// regression target. Wire format:
/// `{"id": "...", "label": "...", "feat": [...], "reg": [4 floats]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub label: String,
    pub feat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<[f64; REG_DIM]>,
}

impl FeatureRecord {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.feat.len() != d_in {
            return Err(Error::Invalid(format!(
                "record `{}` has {} features, expected {d_in}",
                self.id,
                self.feat.len()
            )));
        }
        let finite = self.feat.iter().all(|v| v.is_finite())
            && self.reg.is_none_or(|r| r.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Invalid(format!("record `{}` has non-finite values", self.id)));
        }
        Ok(())
    }
}

pub fn read_records<R: BufRead>(stream: R) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    for (i, line) in stream.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut out: W, records: &[FeatureRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<records>", e))?;
    }
    Ok(())
}

/// Label indices of `records` under `registry`.
pub fn resolve_labels(records: &[FeatureRecord], registry: &ClassRegistry) -> Result<Vec<usize>> {
    records.iter().map(|r| registry.index_of(&r.label)).collect()
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x d_in`
    pub x: Matrix,
    pub labels: Vec<usize>,
    /// `B x 4`; rows without a target are zero and masked out.
    pub reg: Matrix,
    pub reg_mask: Vec<bool>,
}

impl Batch {
    pub fn new(records: &[&FeatureRecord], labels: &[usize]) -> Result<Self> {
        let d_in = records.first().map(|r| r.feat.len()).unwrap_or(0);
        let mut x = Matrix::zeros(records.len(), d_in);
        let mut reg = Matrix::zeros(records.len(), REG_DIM);
        let mut reg_mask = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(d_in)?;
            x.row_mut(i).copy_from_slice(&r.feat);
            if let Some(t) = r.reg {
                reg.row_mut(i).copy_from_slice(&t);
            }
            reg_mask.push(r.reg.is_some());
        }
        Ok(Self {
            x,
            labels: labels.to_vec(),
            reg,
            reg_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let text = "{\"id\":\"a\",\"label\":\"cat\",\"feat\":[1.0,2.0]}\n\n{\"id\":\"b\",\"label\":\"dog\",\"feat\":[0.5,0.0],\"reg\":[1,2,3,4]}\n";
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].reg, Some([1.0, 2.0, 3.0, 4.0]));
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
        let err = read_records("{\"id\":\"a\"}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn batch_masks_missing_targets() {
        let a = FeatureRecord { id: "a".into(), label: "x".into(), feat: vec![1.0, 2.0], reg: None };
        let b = FeatureRecord { id: "b".into(), label: "y".into(), feat: vec![3.0, 4.0], reg: Some([1.0; 4]) };
        let batch = Batch::new(&[&a, &b], &[0, 1]).unwrap();
        assert_eq!(batch.reg_mask, vec![false, true]);
        assert_eq!(batch.x.row(1), &[3.0, 4.0]);
        let bad = FeatureRecord { feat: vec![f64::NAN, 0.0], ..a.clone() };
        assert!(Batch::new(&[&a, &bad], &[0, 0]).is_err());
    }
}
