//! Classification heads.
//!
//! Three scoring rules share one trunk (two fully-connected layers with a
//! rectifier in between) and an optional 4-output regression branch:
//!
//! * baseline: `logits = W v + b`
//! * projection: `logits = Wₑ P v + b`, with `Wₑ` fixed
//! * relation: `logits = Wₑ' P v + b`, where `Wₑ'` is `Wₑ` refined by the
//!   configured [`GraphMode`]
//!
//! Heads return logits; softmax lives in the loss and evaluation code.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Batch, REG_DIM};
use crate::diffmath::{grad_check, GradCheckReport, Matrix, ParamSet, Tape, Var};
use crate::embeddings::{ClassEntry, ClassKind, ClassRegistry, EmbeddingMatrix, RegistryFile, RowSource};
use crate::error::{Error, Result};
use crate::relation::{
    self, relation_forward_on_tape, trainable_transform_on_tape, GraphMode, RelationParams, RelationVars,
    DEFAULT_REDUCED_DIM,
};
use crate::util;

pub const WEIGHT_INIT_STD: f64 = 0.01;
pub const CHECKPOINT_FORMAT: &str = "semrel-head/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Baseline,
    Ssp,
    Srr,
}

impl HeadMode {
    pub fn label(self) -> &'static str {
        match self {
            HeadMode::Baseline => "baseline",
            HeadMode::Ssp => "ssp",
            HeadMode::Srr => "srr",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "baseline" => Ok(HeadMode::Baseline),
            "ssp" => Ok(HeadMode::Ssp),
            "srr" => Ok(HeadMode::Srr),
            other => Err(Error::Config(format!("unknown head mode `{other}` (baseline|ssp|srr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    None,
    Dynamic,
    Heuristic,
    Tt,
}

impl FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "none" => Ok(GraphKind::None),
            "dynamic" => Ok(GraphKind::Dynamic),
            "heuristic" | "hkg" => Ok(GraphKind::Heuristic),
            "tt" | "trainable_transform" => Ok(GraphKind::Tt),
            other => Err(Error::Config(format!(
                "unknown graph mode `{other}` (none|dynamic|heuristic|tt)"
            ))),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::None => "none",
            GraphKind::Dynamic => "dynamic",
            GraphKind::Heuristic => "heuristic",
            GraphKind::Tt => "tt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub graph: GraphKind,
    pub d_in: usize,
    pub d: usize,
    pub reduced_dim: usize,
    pub scale_attention: bool,
    pub decoupled: bool,
    pub regression: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: HeadMode::Srr,
            graph: GraphKind::Dynamic,
            d_in: 64,
            d: 64,
            reduced_dim: DEFAULT_REDUCED_DIM,
            scale_attention: true,
            decoupled: false,
            regression: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cls,
    Reg,
}

/// Coarse parameter groups used by freezing policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The shared trunk, when not decoupled.
    Trunk,
    ClsTrunk,
    RegTrunk,
    /// `W` (baseline) or `P` (projection/relation).
    Classifier,
    Bias,
    Relation,
    Regression,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Trunk,
        ParamGroup::ClsTrunk,
        ParamGroup::RegTrunk,
        ParamGroup::Classifier,
        ParamGroup::Bias,
        ParamGroup::Relation,
        ParamGroup::Regression,
    ];

    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "trunk" => ParamGroup::Trunk,
            "cls_trunk" => ParamGroup::ClsTrunk,
            "reg_trunk" => ParamGroup::RegTrunk,
            "relation" => ParamGroup::Relation,
            "reg" => ParamGroup::Regression,
            "cls" if name == "cls.bias" => ParamGroup::Bias,
            _ => ParamGroup::Classifier,
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "trunk" => Ok(ParamGroup::Trunk),
            "cls_trunk" => Ok(ParamGroup::ClsTrunk),
            "reg_trunk" => Ok(ParamGroup::RegTrunk),
            "classifier" | "proj" => Ok(ParamGroup::Classifier),
            "bias" => Ok(ParamGroup::Bias),
            "relation" => Ok(ParamGroup::Relation),
            "regression" | "reg" => Ok(ParamGroup::Regression),
            other => Err(Error::Config(format!("unknown parameter group `{other}`"))),
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet(pub BTreeSet<ParamGroup>);

impl TrainableSet {
    pub fn all() -> Self {
        Self(ParamGroup::ALL.into_iter().collect())
    }

    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    /// Last layers only: classifier, bias, relation maps and the regression
    /// output layer. Trunks stay frozen.
    pub fn finetune_default() -> Self {
        Self(
            [
                ParamGroup::Classifier,
                ParamGroup::Bias,
                ParamGroup::Relation,
                ParamGroup::Regression,
            ]
            .into_iter()
            .collect(),
        )
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().copied().collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(&ParamGroup::of(name))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which loss terms to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Cls,
    Reg,
    Total,
}

#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss: f64,
    /// Gradients for every active parameter; frozen ones are exactly zero.
    pub grads: ParamSet,
}


#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    config: HeadConfig,
    graph: GraphMode,
    registry: ClassRegistry,
    embeddings: EmbeddingMatrix,
    params: ParamSet,
}

fn insert_trunk<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, d_in: usize, d: usize, rng: &mut R) {
    // He-scaled first layer; the second layer feeds a linear output.
    params.insert(
        format!("{prefix}.fc1.weight"),
        Matrix::randn(d, d_in, (2.0 / d_in as f64).sqrt(), rng),
    );
    params.insert(format!("{prefix}.fc1.bias"), Matrix::zeros(1, d));
    params.insert(
        format!("{prefix}.fc2.weight"),
        Matrix::randn(d, d, (1.0 / d as f64).sqrt(), rng),
    );
    params.insert(format!("{prefix}.fc2.bias"), Matrix::zeros(1, d));
}

fn insert_relation(params: &mut ParamSet, rel: RelationParams) {
    params.insert("relation.t_f".into(), rel.t_f);
    params.insert("relation.t_g".into(), rel.t_g);
    params.insert("relation.t_h".into(), rel.t_h);
    params.insert("relation.t_l".into(), rel.t_l);
}

/// Builds a freshly initialized head. `heuristic` supplies the adjacency
/// when the graph kind is heuristic.
pub fn build_head(
    config: &HeadConfig,
    registry: &ClassRegistry,
    embeddings: &EmbeddingMatrix,
    heuristic: Option<Matrix>,
    seed: u64,
) -> Result<Head> {
    if config.d_in == 0 || config.d == 0 || config.reduced_dim == 0 {
        return Err(Error::Config("head dimensions must be at least 1".into()));
    }
    if !embeddings.matches_registry(registry) {
        return Err(Error::Config("embedding rows do not follow registry order".into()));
    }
    if config.mode != HeadMode::Srr && config.graph != GraphKind::None {
        return Err(Error::Config(format!(
            "graph mode `{}` requires head mode srr",
            config.graph
        )));
    }
    let n = registry.len();
    let graph = match (config.graph, heuristic) {
        (GraphKind::Heuristic, Some(g)) => {
            if g.shape() != (n, n) {
                return Err(Error::Shape {
                    op: "build_head heuristic graph",
                    left: g.shape(),
                    right: (n, n),
                });
            }
            GraphMode::heuristic(g)?
        }
        (GraphKind::Heuristic, None) => {
            return Err(Error::Config("heuristic graph mode needs a co-occurrence graph".into()))
        }
        (GraphKind::None, _) => GraphMode::None,
        (GraphKind::Dynamic, _) => GraphMode::Dynamic,
        (GraphKind::Tt, _) => GraphMode::TrainableTransform,
    };

    let mut rng = util::rng(seed, "head-init", 0);
    let mut params = ParamSet::new();
    if config.decoupled {
        insert_trunk(&mut params, "cls_trunk", config.d_in, config.d, &mut rng);
        insert_trunk(&mut params, "reg_trunk", config.d_in, config.d, &mut rng);
    } else {
        insert_trunk(&mut params, "trunk", config.d_in, config.d, &mut rng);
    }
    match config.mode {
        HeadMode::Baseline => {
            params.insert("cls.weight".into(), Matrix::randn(n, config.d, WEIGHT_INIT_STD, &mut rng));
        }
        HeadMode::Ssp | HeadMode::Srr => {
            params.insert(
                "proj".into(),
                Matrix::randn(embeddings.dim(), config.d, WEIGHT_INIT_STD, &mut rng),
            );
        }
    }
    params.insert("cls.bias".into(), Matrix::zeros(1, n));
    if config.mode == HeadMode::Srr {
        let rel = RelationParams::init(embeddings.dim(), config.reduced_dim, config.scale_attention, &mut rng)?;
        insert_relation(&mut params, rel);
    }
    if config.regression {
        params.insert("reg.weight".into(), Matrix::randn(REG_DIM, config.d, WEIGHT_INIT_STD, &mut rng));
        params.insert("reg.bias".into(), Matrix::zeros(1, REG_DIM));
    }
    Ok(Head {
        config: config.clone(),
        graph,
        registry: registry.clone(),
        embeddings: embeddings.clone(),
        params,
    })
}

struct Recorded {
    logits: Var,
    reg: Option<Var>,
    vars: IndexMap<String, Var>,
}

impl Head {
    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn mode(&self) -> HeadMode {
        self.config.mode
    }

    pub fn graph(&self) -> &GraphMode {
        &self.graph
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn num_classes(&self) -> usize {
        self.registry.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    /// Replaces parameter values; names and shapes must already exist.
    pub fn set_params(&mut self, values: &ParamSet) -> Result<()> {
        for (name, m) in values {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
            if slot.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "set_params",
                    left: slot.shape(),
                    right: m.shape(),
                });
            }
            *slot = m.clone();
        }
        Ok(())
    }

    pub fn relation_params(&self) -> Option<RelationParams> {
        Some(RelationParams {
            t_f: self.params.get("relation.t_f")?.clone(),
            t_g: self.params.get("relation.t_g")?.clone(),
            t_h: self.params.get("relation.t_h")?.clone(),
            t_l: self.params.get("relation.t_l")?.clone(),
            scale_attention: self.config.scale_attention,
        })
    }

    fn trunk_prefix(&self, branch: Branch) -> &'static str {
        match (self.config.decoupled, branch) {
            (false, _) => "trunk",
            (true, Branch::Cls) => "cls_trunk",
            (true, Branch::Reg) => "reg_trunk",
        }
    }

    /// Parameters that take part in the forward pass of the current mode.
    pub fn active_param_names(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|name| match name.as_str() {
                "relation.t_f" | "relation.t_g" => {
                    self.config.mode == HeadMode::Srr && matches!(self.graph, GraphMode::Dynamic)
                }
                "relation.t_h" | "relation.t_l" => {
                    self.config.mode == HeadMode::Srr
                        && matches!(self.graph, GraphMode::Dynamic | GraphMode::TrainableTransform)
                }
                _ => true,
            })
            .cloned()
            .collect()
    }

    /// SHA-256 over parameter names and values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.params {
            h.update(name.as_bytes());
            m.feed_hash(&mut h);
        }
        hex::encode(h.finalize())
    }

    fn require_mode(&self, op: &'static str, expected: HeadMode) -> Result<()> {
        if self.config.mode != expected {
            return Err(Error::WrongMode {
                op,
                expected: expected.label(),
                found: self.config.mode.to_string(),
            });
        }
        Ok(())
    }

    /// `Wₑ'`: the class embeddings after the configured refinement.
    pub fn effective_embeddings(&self) -> Result<Matrix> {
        let we = self.embeddings.matrix();
        match (&self.config.mode, &self.graph) {
            (HeadMode::Srr, GraphMode::Dynamic) => {
                relation::relation_forward(we, &self.relation_params().expect("srr head has relation maps"))
            }
            (HeadMode::Srr, GraphMode::TrainableTransform) => {
                relation::trainable_transform(we, &self.relation_params().expect("srr head has relation maps"))
            }
            (HeadMode::Srr, GraphMode::Heuristic(g)) => {
                if g.rows() != we.rows() {
                    return Err(Error::Shape {
                        op: "heuristic graph",
                        left: g.shape(),
                        right: (we.rows(), we.rows()),
                    });
                }
                g.matmul(we)
            }
            _ => Ok(we.clone()),
        }
    }

    /// The `N x d` matrix whose rows score a trunk output.
    pub fn class_scores(&self) -> Result<Matrix> {
        match self.config.mode {
            HeadMode::Baseline => Ok(self.params["cls.weight"].clone()),
            _ => self.effective_embeddings()?.matmul(&self.params["proj"]),
        }
    }

    fn bias(&self) -> &[f64] {
        self.params["cls.bias"].data()
    }

    fn check_v(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.config.d {
            return Err(Error::Shape {
                op: "logits",
                left: (v.len(), 1),
                right: (self.config.d, 1),
            });
        }
        Ok(())
    }

    fn affine(&self, scores: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = scores.matvec(v)?;
        for (o, b) in out.iter_mut().zip(self.bias()) {
            *o += b;
        }
        Ok(out)
    }

    /// `W v + b`.
    pub fn logits_baseline(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_mode("logits_baseline", HeadMode::Baseline)?;
        self.check_v(v)?;
        self.affine(&self.params["cls.weight"], v)
    }

    /// `Wₑ (P v) + b`.
    pub fn logits_ssp(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_mode("logits_ssp", HeadMode::Ssp)?;
        self.check_v(v)?;
        let pv = self.params["proj"].matvec(v)?;
        self.affine(self.embeddings.matrix(), &pv)
    }

    /// `Wₑ' (P v) + b` with `Wₑ'` from the graph mode.
    pub fn logits_srr(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.require_mode("logits_srr", HeadMode::Srr)?;
        self.check_v(v)?;
        let pv = self.params["proj"].matvec(v)?;
        self.affine(&self.effective_embeddings()?, &pv)
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self.config.mode {
            HeadMode::Baseline => self.logits_baseline(v),
            HeadMode::Ssp => self.logits_ssp(v),
            HeadMode::Srr => self.logits_srr(v),
        }
    }

    /// Two fully-connected layers with a rectifier in between.
    pub fn trunk_forward(&self, raw: &[f64], branch: Branch) -> Result<Vec<f64>> {
        let p = self.trunk_prefix(branch);
        let w1 = &self.params[&format!("{p}.fc1.weight")];
        let b1 = &self.params[&format!("{p}.fc1.bias")];
        let w2 = &self.params[&format!("{p}.fc2.weight")];
        let b2 = &self.params[&format!("{p}.fc2.bias")];
        let mut h = w1.matvec(raw)?;
        for (x, b) in h.iter_mut().zip(b1.data()) {
            *x = (*x + b).max(0.0);
        }
        let mut v = w2.matvec(&h)?;
        for (x, b) in v.iter_mut().zip(b2.data()) {
            *x += b;
        }
        Ok(v)
    }

    /// Linear regression output on a reg-branch trunk vector.
    pub fn regression_forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (Some(w), Some(b)) = (self.params.get("reg.weight"), self.params.get("reg.bias")) else {
            return Err(Error::Config("head has no regression branch".into()));
        };
        let mut out = w.matvec(v)?;
        for (o, x) in out.iter_mut().zip(b.data()) {
            *o += x;
        }
        Ok(out)
    }

    /// Logits for raw input features, one row per record.
    pub fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        let scores = self.class_scores()?;
        let p = self.trunk_prefix(Branch::Cls);
        let h = x
            .matmul(&self.params[&format!("{p}.fc1.weight")].transpose())?
            .add_row_broadcast(&self.params[&format!("{p}.fc1.bias")])?
            .relu();
        let v = h
            .matmul(&self.params[&format!("{p}.fc2.weight")].transpose())?
            .add_row_broadcast(&self.params[&format!("{p}.fc2.bias")])?;
        v.matmul(&scores.transpose())?
            .add_row_broadcast(&self.params["cls.bias"])
    }

    fn trunk_on_tape(&self, tape: &mut Tape, vars: &IndexMap<String, Var>, x: Var, branch: Branch) -> Result<Var> {
        let p = self.trunk_prefix(branch);
        let w1t = tape.transpose(vars[&format!("{p}.fc1.weight")]);
        let h = tape.matmul(x, w1t)?;
        let h = tape.add_row_broadcast(h, vars[&format!("{p}.fc1.bias")])?;
        let h = tape.relu(h);
        let w2t = tape.transpose(vars[&format!("{p}.fc2.weight")]);
        let v = tape.matmul(h, w2t)?;
        tape.add_row_broadcast(v, vars[&format!("{p}.fc2.bias")])
    }

    fn record(&self, tape: &mut Tape, x: &Matrix, trainable: &TrainableSet) -> Result<Recorded> {
        let mut vars = IndexMap::new();
        for name in self.active_param_names() {
            let requires = trainable.contains(&name);
            let v = tape.leaf(self.params[&name].clone(), requires);
            vars.insert(name, v);
        }
        let x = tape.constant(x.clone());
        let cls_v = self.trunk_on_tape(tape, &vars, x, Branch::Cls)?;
        let reg_v = if self.config.decoupled {
            self.trunk_on_tape(tape, &vars, x, Branch::Reg)?
        } else {
            cls_v
        };
        let scores = match self.config.mode {
            HeadMode::Baseline => vars["cls.weight"],
            HeadMode::Ssp | HeadMode::Srr => {
                let we = tape.constant(self.embeddings.matrix().clone());
                let refined = match (&self.config.mode, &self.graph) {
                    (HeadMode::Srr, GraphMode::Dynamic) => {
                        let rv = RelationVars {
                            t_f: vars["relation.t_f"],
                            t_g: vars["relation.t_g"],
                            t_h: vars["relation.t_h"],
                            t_l: vars["relation.t_l"],
                        };
                        let scale = self.relation_params().expect("relation maps").attention_scale();
                        relation_forward_on_tape(tape, we, rv, scale)?
                    }
                    (HeadMode::Srr, GraphMode::TrainableTransform) => {
                        let rv = RelationVars {
                            t_f: vars["relation.t_h"],
                            t_g: vars["relation.t_h"],
                            t_h: vars["relation.t_h"],
                            t_l: vars["relation.t_l"],
                        };
                        trainable_transform_on_tape(tape, we, rv)?
                    }
                    (HeadMode::Srr, GraphMode::Heuristic(g)) => {
                        let g = tape.constant(g.clone());
                        tape.matmul(g, we)?
                    }
                    _ => we,
                };
                tape.matmul(refined, vars["proj"])?
            }
        };
        let st = tape.transpose(scores);
        let logits = tape.matmul(cls_v, st)?;
        let logits = tape.add_row_broadcast(logits, vars["cls.bias"])?;
        let reg = if self.config.regression {
            let wt = tape.transpose(vars["reg.weight"]);
            let r = tape.matmul(reg_v, wt)?;
            Some(tape.add_row_broadcast(r, vars["reg.bias"])?)
        } else {
            None
        };
        Ok(Recorded { logits, reg, vars })
    }

    /// Mean cross-entropy (plus mean squared regression error when the
    /// branch is enabled) and gradients for the trainable parameters.
    pub fn loss_and_grads(&self, batch: &Batch, trainable: &TrainableSet, term: LossTerm) -> Result<LossGrads> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &batch.x, trainable)?;
        let cls = tape.softmax_cross_entropy(rec.logits, &batch.labels)?;
        let reg = match rec.reg {
            Some(r) => Some(tape.squared_error(r, &batch.reg, &batch.reg_mask)?),
            None => None,
        };
        let loss_cls = tape.scalar(cls);
        let loss_reg = reg.map(|r| tape.scalar(r)).unwrap_or(0.0);
        let target = match (term, reg) {
            (LossTerm::Cls, _) | (LossTerm::Total, None) => cls,
            (LossTerm::Reg, Some(r)) => r,
            (LossTerm::Reg, None) => return Err(Error::Config("head has no regression branch".into())),
            (LossTerm::Total, Some(r)) => tape.add(cls, r)?,
        };
        let loss = tape.scalar(target);
        let g = tape.backward(target)?;
        let grads = rec
            .vars
            .iter()
            .map(|(name, v)| (name.clone(), g.get(*v)))
            .collect();
        Ok(LossGrads {
            loss_cls,
            loss_reg,
            loss,
            grads,
        })
    }

    /// Appends novel classes (before background) with their embedding rows.
    /// `P`, trunks and relation maps are untouched; new biases are zero.
    pub fn expand_classes(&self, novel: &[(ClassEntry, Vec<f64>)]) -> Result<Head> {
        if self.config.mode == HeadMode::Baseline {
            return Err(Error::WrongMode {
                op: "expand_classes",
                expected: "ssp or srr",
                found: self.config.mode.to_string(),
            });
        }
        self.expanded_with(novel, |_, _| Ok(()))
    }

    /// Baseline expansion: the old classifier rows are copied and the new
    /// rows drawn from N(0, 0.01²).
    pub fn rebuild_baseline(&self, novel: &[(ClassEntry, Vec<f64>)], seed: u64) -> Result<Head> {
        self.require_mode("rebuild_baseline", HeadMode::Baseline)?;
        let mut rng = util::rng(seed, "baseline-expand", 0);
        self.expanded_with(novel, |params, order| {
            let old = &params["cls.weight"];
            let mut rows = Vec::with_capacity(order.len());
            for slot in order {
                match slot {
                    Some(i) => rows.push(old.row(*i).to_vec()),
                    None => rows.push(Matrix::randn(1, old.cols(), WEIGHT_INIT_STD, &mut rng).into_data()),
                }
            }
            params.insert("cls.weight".into(), Matrix::from_rows(&rows)?);
            Ok(())
        })
    }

    fn expanded_with(
        &self,
        novel: &[(ClassEntry, Vec<f64>)],
        mut extra: impl FnMut(&mut ParamSet, &[Option<usize>]) -> Result<()>,
    ) -> Result<Head> {
        let entries: Vec<ClassEntry> = novel.iter().map(|(c, _)| c.clone()).collect();
        let registry = self.registry.expanded(&entries)?;
        let old_n = self.registry.len();
        let bg = old_n - 1;
        // For each new slot: the old index it came from, or None for new classes.
        let mut order: Vec<Option<usize>> = (0..bg).map(Some).collect();
        order.extend(std::iter::repeat_n(None, novel.len()));
        order.push(Some(bg));

        let we = self.embeddings.matrix();
        let mut matrix = Matrix::zeros(order.len(), we.cols());
        let mut sources = Vec::with_capacity(order.len());
        let mut fresh = novel.iter();
        for (k, slot) in order.iter().enumerate() {
            match slot {
                Some(i) => {
                    matrix.row_mut(k).copy_from_slice(we.row(*i));
                    sources.push(self.embeddings.sources()[*i].clone());
                }
                None => {
                    let (entry, row) = fresh.next().expect("one row per new class");
                    if row.len() != we.cols() {
                        return Err(Error::Shape {
                            op: "expand_classes",
                            left: (1, row.len()),
                            right: (1, we.cols()),
                        });
                    }
                    let unit = Matrix::row_vector(row).l2_normalize_rows()?;
                    matrix.row_mut(k).copy_from_slice(unit.row(0));
                    sources.push(RowSource::Tokens(entry.tokens.clone()));
                }
            }
        }
        // Old rows are copied verbatim so existing class scores are unchanged.
        let embeddings = EmbeddingMatrix::from_normalized(registry.names(), sources, matrix);

        let mut params = self.params.clone();
        let old_b = &self.params["cls.bias"];
        let b: Vec<f64> = order.iter().map(|s| s.map_or(0.0, |i| old_b.data()[i])).collect();
        params.insert("cls.bias".into(), Matrix::row_vector(&b));
        extra(&mut params, &order)?;

        let graph = match &self.graph {
            GraphMode::Heuristic(g) => {
                let n = order.len();
                let mut out = Matrix::zeros(n, n);
                for (i, si) in order.iter().enumerate() {
                    match si {
                        Some(oi) => {
                            for (j, sj) in order.iter().enumerate() {
                                if let Some(oj) = sj {
                                    out.set(i, j, g.get(*oi, *oj));
                                }
                            }
                        }
                        None => out.set(i, i, 1.0),
                    }
                }
                GraphMode::Heuristic(out)
            }
            other => other.clone(),
        };
        Ok(Head {
            config: self.config.clone(),
            graph,
            registry,
            embeddings,
            params,
        })
    }

    /// Expands to every class of `registry` missing from this head, taking
    /// rows from `embeddings` by name. Baseline heads are rebuilt instead.
    pub fn expand_to(&self, registry: &ClassRegistry, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Head> {
        for c in self.registry.entries() {
            let idx = registry.index_of(&c.name)?;
            if (registry.entry(idx).kind == ClassKind::Background) != (c.kind == ClassKind::Background) {
                return Err(Error::Config(format!("background class mismatch at `{}`", c.name)));
            }
        }
        let novel = registry
            .entries()
            .iter()
            .filter(|c| !self.registry.contains(&c.name))
            .map(|c| Ok((c.clone(), embeddings.row_of(&c.name)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        if novel.is_empty() {
            return Ok(self.clone());
        }
        match self.config.mode {
            HeadMode::Baseline => self.rebuild_baseline(&novel, seed),
            _ => self.expand_classes(&novel),
        }
    }

    /// Splits a shared trunk into independent classification and
    /// regression copies.
    pub fn decoupled(&self) -> Head {
        if self.config.decoupled {
            return self.clone();
        }
        let mut params = ParamSet::new();
        for (name, m) in &self.params {
            if let Some(rest) = name.strip_prefix("trunk.") {
                params.insert(format!("cls_trunk.{rest}"), m.clone());
            }
        }
        for (name, m) in &self.params {
            if let Some(rest) = name.strip_prefix("trunk.") {
                params.insert(format!("reg_trunk.{rest}"), m.clone());
            }
        }
        for (name, m) in &self.params {
            if !name.starts_with("trunk.") {
                params.insert(name.clone(), m.clone());
            }
        }
        let mut config = self.config.clone();
        config.decoupled = true;
        Head {
            config,
            graph: self.graph.clone(),
            registry: self.registry.clone(),
            embeddings: self.embeddings.clone(),
            params,
        }
    }

    /// Switches the embedding refinement. A projection head is promoted to a
    /// relation head with freshly initialized maps (`T_l = 0`).
    pub fn with_graph(&self, kind: GraphKind, heuristic: Option<Matrix>, seed: u64) -> Result<Head> {
        if self.config.mode == HeadMode::Baseline {
            if kind == GraphKind::None {
                return Ok(self.clone());
            }
            return Err(Error::WrongMode {
                op: "with_graph",
                expected: "ssp or srr",
                found: "baseline".into(),
            });
        }
        let mut head = self.clone();
        if kind != GraphKind::None && head.config.mode == HeadMode::Ssp {
            let mut rng = util::rng(seed, "relation-init", 0);
            let rel = RelationParams::init(
                self.embeddings.dim(),
                self.config.reduced_dim,
                self.config.scale_attention,
                &mut rng,
            )?;
            let mut params = ParamSet::new();
            for (name, m) in &head.params {
                params.insert(name.clone(), m.clone());
                if name == "cls.bias" {
                    insert_relation(&mut params, rel.clone());
                }
            }
            head.params = params;
            head.config.mode = HeadMode::Srr;
        }
        let n = self.registry.len();
        head.graph = match kind {
            GraphKind::None => GraphMode::None,
            GraphKind::Dynamic => GraphMode::Dynamic,
            GraphKind::Tt => GraphMode::TrainableTransform,
            GraphKind::Heuristic => {
                let g = heuristic
                    .ok_or_else(|| Error::Config("heuristic graph mode needs a co-occurrence graph".into()))?;
                if g.shape() != (n, n) {
                    return Err(Error::Shape {
                        op: "with_graph",
                        left: g.shape(),
                        right: (n, n),
                    });
                }
                GraphMode::heuristic(g)?
            }
        };
        head.config.graph = kind;
        Ok(head)
    }

    pub fn to_checkpoint(&self) -> HeadCheckpoint {
        HeadCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            registry: self.registry.to_file(),
            embeddings_hash: self.embeddings.content_hash(),
            embeddings: self.embeddings.clone(),
            heuristic_graph: match &self.graph {
                GraphMode::Heuristic(g) => Some(g.clone()),
                _ => None,
            },
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: HeadCheckpoint) -> Result<Head> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let registry = ClassRegistry::from_file(&ck.registry)?;
        if !ck.embeddings.matches_registry(&registry) {
            return Err(Error::Config("checkpoint embeddings do not match its registry".into()));
        }
        if ck.embeddings.content_hash() != ck.embeddings_hash {
            return Err(Error::Config("checkpoint embedding hash mismatch".into()));
        }
        let graph = match (ck.config.graph, ck.heuristic_graph) {
            (GraphKind::Heuristic, Some(g)) => GraphMode::heuristic(g)?,
            (GraphKind::Heuristic, None) => {
                return Err(Error::Config("heuristic checkpoint lacks its graph".into()))
            }
            (GraphKind::None, _) => GraphMode::None,
            (GraphKind::Dynamic, _) => GraphMode::Dynamic,
            (GraphKind::Tt, _) => GraphMode::TrainableTransform,
        };
        let fresh = build_head(
            &ck.config,
            &registry,
            &ck.embeddings,
            match &graph {
                GraphMode::Heuristic(g) => Some(g.clone()),
                _ => None,
            },
            0,
        )?;
        let mut head = fresh;
        if head.params.len() != ck.params.len() || head.params.keys().zip(ck.params.keys()).any(|(a, b)| a != b) {
            return Err(Error::Config("checkpoint parameter names do not match its configuration".into()));
        }
        head.set_params(&ck.params)?;
        head.graph = graph;
        Ok(head)
    }
}

/// Compares [`Head::loss_and_grads`] against central differences for every
/// active parameter. Frozen parameters are not probed but must have an
/// exactly-zero analytic gradient.
pub fn grad_check_head(
    head: &Head,
    batch: &Batch,
    trainable: &TrainableSet,
    term: LossTerm,
    eps: f64,
) -> Result<GradCheckReport> {
    let names = head.active_param_names();
    let params: ParamSet = names.iter().map(|n| (n.clone(), head.params[n].clone())).collect();
    let frozen: Vec<&str> = names.iter().filter(|n| !trainable.contains(n)).map(String::as_str).collect();
    grad_check(&params, &frozen, eps, |p| {
        let mut probe = head.clone();
        probe.set_params(p)?;
        let out = probe.loss_and_grads(batch, trainable, term)?;
        Ok((out.loss, out.grads))
    })
}

/// Serialized head: configuration, registry, embeddings and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadCheckpoint {
    pub format: String,
    pub config: HeadConfig,
    pub registry: RegistryFile,
    pub embeddings_hash: String,
    pub embeddings: EmbeddingMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heuristic_graph: Option<Matrix>,
    pub params: IndexMap<String, Matrix>,
}
