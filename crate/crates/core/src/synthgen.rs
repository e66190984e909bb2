//! Seeded synthetic feature datasets whose class geometry follows the
//! embedding geometry to a tunable degree `α`.
//!
//! A map `M: dₑ → d_in` is drawn once. Class `c` gets the prototype
//! `normalize(α M eᵢ + (1 − α) uᵢ)` with `uᵢ` a random unit vector, and each
//! record is its prototype plus isotropic Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureRecord, REG_DIM};
use crate::diffmath::{l2_norm, Matrix};
use crate::embeddings::{compose_background_row, name_key, ClassKind, ClassRegistry, EmbeddingMatrix, RowSource};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub d_in: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Noise std; `None` applies the margin rule `σ = κ δ_min / √d_in`.
    pub sigma: Option<f64>,
    /// `κ` of the margin rule.
    pub margin_factor: f64,
    pub alpha: f64,
    /// Supplied per run rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Attach random 4-d regression targets correlated with the features.
    pub regression: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            train_per_class: 20,
            test_per_class: 20,
            sigma: None,
            margin_factor: 2.0,
            alpha: 0.9,
            seed: 0,
            regression: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("synthetic dimensions and counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.sigma.is_some_and(|s| !(s >= 0.0 && s.is_finite())) || !(self.margin_factor >= 0.0) {
            return Err(Error::Config("noise scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
    /// `N x d_in`, registry order, unit rows.
    pub prototypes: Matrix,
    /// Smallest Euclidean distance between two prototypes.
    pub min_separation: f64,
    pub sigma: f64,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = l2_norm(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt over `vectors`, dropping near-dependent ones.
fn orthonormal_basis(vectors: impl Iterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in vectors {
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = l2_norm(&v);
        if n > 1e-9 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `d_in x dₑ` map. When `d_in` is at least the rank of `Wₑ` it is an
/// isometry on the row span of `Wₑ` (so cosines between class embeddings
/// carry over exactly); otherwise a Gaussian map scaled by `1/√d_in`.
fn draw_map(we: &Matrix, d_in: usize, seed: u64) -> Matrix {
    let mut rng = util::rng(seed, "synth-map", 0);
    let span = orthonormal_basis((0..we.rows()).map(|i| we.row(i).to_vec()));
    if d_in >= span.len() {
        let out = orthonormal_basis((0..span.len() * 2 + 8).map(|_| gaussian_vec(&mut rng, d_in)));
        let mut m = Matrix::zeros(d_in, we.cols());
        for (q, u) in span.iter().zip(&out) {
            for i in 0..d_in {
                let row = m.row_mut(i);
                for (x, qj) in row.iter_mut().zip(q) {
                    *x += u[i] * qj;
                }
            }
        }
        m
    } else {
        Matrix::randn(d_in, we.cols(), 1.0 / (d_in as f64).sqrt(), &mut rng)
    }
}

/// Train and test records for every registry class.
pub fn generate(we: &EmbeddingMatrix, registry: &ClassRegistry, cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    if !we.matches_registry(registry) {
        return Err(Error::Config("embedding rows do not follow registry order".into()));
    }
    let map = draw_map(we.matrix(), cfg.d_in, cfg.seed);
    let mut protos = Matrix::zeros(registry.len(), cfg.d_in);
    for (c, entry) in registry.entries().iter().enumerate() {
        let semantic = map.matvec(we.matrix().row(c))?;
        let mut rng = util::rng(cfg.seed, &format!("synth-proto/{}", name_key(&entry.name)), 0);
        let random = unit(&mut rng, cfg.d_in);
        let mixed: Vec<f64> = semantic
            .iter()
            .zip(&random)
            .map(|(s, u)| cfg.alpha * s + (1.0 - cfg.alpha) * u)
            .collect();
        let n = l2_norm(&mixed);
        let row = if n > 1e-12 { mixed.iter().map(|x| x / n).collect() } else { random };
        protos.row_mut(c).copy_from_slice(&row);
    }
    let mut min_sep = f64::INFINITY;
    for i in 0..protos.rows() {
        for j in i + 1..protos.rows() {
            let d: f64 = protos.row(i).iter().zip(protos.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            min_sep = min_sep.min(d);
        }
    }
    let sigma = cfg
        .sigma
        .unwrap_or_else(|| if min_sep.is_finite() { cfg.margin_factor * min_sep / (cfg.d_in as f64).sqrt() } else { 0.0 });

    let reg_map = Matrix::randn(REG_DIM, cfg.d_in, 1.0 / (cfg.d_in as f64).sqrt(), &mut util::rng(cfg.seed, "synth-reg", 0));
    let make = |split: &str, count: usize| -> Result<Vec<FeatureRecord>> {
        let mut out = Vec::with_capacity(count * registry.len());
        for (c, entry) in registry.entries().iter().enumerate() {
            let mut rng = util::rng(cfg.seed, &format!("synth-{split}/{}", name_key(&entry.name)), 0);
            for i in 0..count {
                let feat: Vec<f64> = protos
                    .row(c)
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        p + sigma * z
                    })
                    .collect();
                let reg = if cfg.regression {
                    let r = reg_map.matvec(&feat)?;
                    Some([r[0], r[1], r[2], r[3]])
                } else {
                    None
                };
                out.push(FeatureRecord {
                    id: format!("{split}-{}-{i}", entry.name.replace(char::is_whitespace, "_")),
                    label: entry.name.clone(),
                    feat,
                    reg,
                });
            }
        }
        Ok(out)
    };
    Ok(SynthData {
        train: make("train", cfg.train_per_class)?,
        test: make("test", cfg.test_per_class)?,
        prototypes: protos,
        min_separation: min_sep,
        sigma,
    })
}

/// Embeddings drawn from a shared low-dimensional latent space plus
/// isotropic jitter, so classes relate to one another the way word vectors
/// of related categories do. The background row is
/// [`compose_background_row`] with `background_seed`.
pub fn clustered_embeddings(
    registry: &ClassRegistry,
    dim: usize,
    latent_dim: usize,
    jitter: f64,
    seed: u64,
    background_seed: u64,
) -> Result<EmbeddingMatrix> {
    if dim == 0 || latent_dim == 0 {
        return Err(Error::Config("embedding and latent dimensions must be at least 1".into()));
    }
    let mut rng = util::rng(seed, "clustered-basis", 0);
    let basis = Matrix::randn(dim, latent_dim, 1.0, &mut rng);
    let mut rows = Vec::with_capacity(registry.len());
    let mut sources = Vec::with_capacity(registry.len());
    for c in registry.entries() {
        if c.kind == ClassKind::Background {
            rows.push(compose_background_row(dim, background_seed));
            sources.push(RowSource::Background);
            continue;
        }
        let mut rng = util::rng(seed, &format!("clustered/{}", name_key(&c.name)), 0);
        let z = gaussian_vec(&mut rng, latent_dim);
        let mut row = basis.matvec(&z)?;
        let scale = l2_norm(&row) / (dim as f64).sqrt();
        for x in row.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += jitter * scale * e;
        }
        rows.push(row);
        sources.push(RowSource::Random);
    }
    EmbeddingMatrix::from_parts(registry.names(), sources, Matrix::from_rows(&rows)?)
}

/// Per-image label sets where classes co-occur with probability rising
/// with embedding cosine; feeds the co-occurrence graph.
pub fn cooccurrence_label_sets(
    we: &EmbeddingMatrix,
    registry: &ClassRegistry,
    images: usize,
    seed: u64,
) -> Vec<Vec<String>> {
    let mut rng = util::rng(seed, "cooccurrence", 0);
    let classes: Vec<usize> = (0..registry.len())
        .filter(|&i| registry.entry(i).kind != ClassKind::Background)
        .collect();
    let m = we.matrix();
    (0..images)
        .map(|_| {
            let anchor = classes[rng.random_range(0..classes.len())];
            let mut set = vec![registry.entry(anchor).name.clone()];
            for &j in &classes {
                if j != anchor {
                    let p = dot(m.row(anchor), m.row(j)).max(0.0).powi(2);
                    if rng.random_bool(p.min(1.0)) {
                        set.push(registry.entry(j).name.clone());
                    }
                }
            }
            set
        })
        .collect()
}
