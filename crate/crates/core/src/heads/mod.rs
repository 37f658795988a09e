//! Frozen-backbone transfer heads.
//!
//! A trained study encoder is loaded read-only and used once to turn every
//! study into a fixed feature vector ([`extract_frozen_features`]); the
//! backbone is never updated afterwards. Two small heads train on those
//! features: a multi-label diagnosis head with a sigmoid link per diagnosis
//! ([`train_multilabel_head`]) and a 3-class referral-priority head offered
//! under three candidate losses ([`train_priority_head`]). Heads train on
//! the retrospective split and are always scored on the prospective split.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ckpt;
use crate::clip::train::{ClipBundle, ClipBundleConfig, StudyInputs};
use crate::cohort::{Priority, Split, StudyRecord};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::rng;

// ---- feature extraction ---------------------------------------------------

/// One study's frozen embedding together with the labels heads train on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub study_id: String,
    pub split: Split,
    pub features: Vec<f64>,
    pub label_bits: Vec<u8>,
    pub priority: Priority,
}

/// Frozen per-study features for a whole cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub dim: usize,
    pub n_diagnoses: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if self.rows.is_empty() {
            return Err(Error::degenerate("feature table holds no studies"));
        }
        let mut seen = std::collections::HashSet::new();
        for row in &self.rows {
            if row.features.len() != self.dim {
                return Err(Error::shape(format!(
                    "study {} carries {} features where {} were promised",
                    row.study_id,
                    row.features.len(),
                    self.dim
                )));
            }
            if row.label_bits.len() != self.n_diagnoses {
                return Err(Error::shape(format!(
                    "study {} carries {} label bits where {} were promised",
                    row.study_id,
                    row.label_bits.len(),
                    self.n_diagnoses
                )));
            }
            if row.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::degenerate(format!(
                    "study {} has non-finite features",
                    row.study_id
                )));
            }
            if !seen.insert(row.study_id.as_str()) {
                return Err(Error::config(format!(
                    "study {} appears twice in the feature table",
                    row.study_id
                )));
            }
        }
        Ok(())
    }

    pub fn rows_in(&self, split: Split) -> Vec<&FeatureRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    /// Stack the given rows into an (n, dim) matrix.
    pub fn matrix_of(rows: &[&FeatureRow], dim: usize) -> Array2<f64> {
        let mut x = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.features.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        x
    }
}

/// Load a trained study encoder from `checkpoint` and embed every study in
/// `inputs`, attaching labels from the matching cohort record. The encoder
/// runs in evaluation mode only; its weights are read once and never
/// written back.
pub fn extract_frozen_features(
    checkpoint: &Path,
    inputs: &[StudyInputs],
    records: &[StudyRecord],
) -> Result<FeatureTable> {
    let manifest = ckpt::read_manifest(checkpoint, "clip")?;
    let cfg_value = manifest
        .config
        .get("bundle")
        .cloned()
        .ok_or_else(|| Error::checkpoint("checkpoint lacks a `bundle` config block"))?;
    let cfg: ClipBundleConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::checkpoint(format!("bundle config parse: {e}")))?;
    let mut bundle = ClipBundle::new(cfg, 0.0, manifest.seed)?;
    ckpt::load_into(checkpoint, &manifest, &mut bundle.store)?;
    frozen_features_with(&bundle, inputs, records)
}

/// [`extract_frozen_features`] against an encoder that is already in memory.
pub fn frozen_features_with(
    bundle: &ClipBundle,
    inputs: &[StudyInputs],
    records: &[StudyRecord],
) -> Result<FeatureTable> {
    if inputs.is_empty() {
        return Err(Error::degenerate("no studies to embed"));
    }
    let by_id: HashMap<&str, &StudyRecord> =
        records.iter().map(|r| (r.study_id.as_str(), r)).collect();
    let n_diagnoses = records
        .first()
        .map(|r| r.labels.bits.len())
        .ok_or_else(|| Error::degenerate("no study records supplied"))?;
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let record = by_id.get(input.study_id.as_str()).ok_or_else(|| {
            Error::config(format!("study {} has no cohort record", input.study_id))
        })?;
        let embedding = bundle.encode_study_eval(input)?;
        rows.push(FeatureRow {
            study_id: input.study_id.clone(),
            split: input.split,
            features: embedding.to_vec(),
            label_bits: record.labels.bits.clone(),
            priority: record.labels.priority,
        });
    }
    let table = FeatureTable {
        dim: bundle.cfg.hier.embed_dim,
        n_diagnoses,
        rows,
    };
    table.validate()?;
    Ok(table)
}

// ---- AUROC ----------------------------------------------------------------

/// Area under the ROC curve by the Mann-Whitney rank statistic; tied scores
/// receive half credit. `None` when either class is absent, in which case
/// the value is undefined rather than zero.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks; a tied block shares the average of its ranks.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            rank[order[k]] = shared;
        }
        i = j + 1;
    }
    let positive_rank_sum: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let u = positive_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

// ---- shared head plumbing ---------------------------------------------------

/// Hyperparameters for head training. One config covers both heads; the
/// metric fields only matter for the ordinal-metric priority loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    /// Hidden width of the single rectified layer.
    pub hidden: usize,
    /// Full-batch gradient steps.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Output width of the metric embedding head.
    pub metric_dim: usize,
    /// Triplets sampled per step for the ordinal-metric loss.
    pub triplets_per_step: usize,
    /// Triplet margin per unit of ordinal distance between the anchor's
    /// class and the negative's class.
    pub margin: f64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            steps: 300,
            lr: 1e-2,
            seed: 0,
            metric_dim: 16,
            triplets_per_step: 64,
            margin: 1.0,
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.metric_dim == 0 || self.triplets_per_step == 0
        {
            return Err(Error::config(
                "hidden width, steps, metric width, and triplets per step must all be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::config("triplet margin must be positive and finite"));
        }
        Ok(())
    }
}

fn split_matrix<'t>(
    table: &'t FeatureTable,
    split: Split,
) -> Result<(Array2<f64>, Vec<&'t FeatureRow>)> {
    let rows = table.rows_in(split);
    if rows.is_empty() {
        return Err(Error::degenerate(format!(
            "the {split:?} split holds no studies"
        )));
    }
    let x = FeatureTable::matrix_of(&rows, table.dim);
    Ok((x, rows))
}

fn label_matrix(rows: &[&FeatureRow], n_diagnoses: usize) -> Array2<f64> {
    let mut y = Array2::zeros((rows.len(), n_diagnoses));
    for (i, row) in rows.iter().enumerate() {
        for (j, &bit) in row.label_bits.iter().enumerate() {
            y[[i, j]] = f64::from(bit.min(1));
        }
    }
    y
}

/// Per-diagnosis positive weight: the negative/positive count ratio capped
/// at 20. Degenerate columns (no positives or no negatives) weigh 1 so the
/// loss stays finite and the column still trains toward its constant label.
pub fn positive_weights(labels: &Array2<f64>) -> Array1<f64> {
    let n = labels.nrows() as f64;
    let mut w = Array1::ones(labels.ncols());
    for (j, col) in labels.columns().into_iter().enumerate() {
        let pos: f64 = col.sum();
        let neg = n - pos;
        if pos > 0.0 && neg > 0.0 {
            w[j] = (neg / pos).min(20.0);
        }
    }
    w
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---- multi-label diagnosis head ---------------------------------------------

/// One rectified hidden layer into independent per-diagnosis logits with a
/// sigmoid link. Owns its own parameter store, so training it cannot touch
/// the backbone.
#[derive(Debug)]
pub struct DiagnosisHead {
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    pub in_dim: usize,
    pub n_diagnoses: usize,
}

impl DiagnosisHead {
    pub fn new(in_dim: usize, hidden: usize, n_diagnoses: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "diagnosis-head", 0);
        let l1 = Linear::new(&mut store, &mut r, "diag.l1", in_dim, hidden, true);
        let l2 = Linear::new(&mut store, &mut r, "diag.l2", hidden, n_diagnoses, true);
        Self {
            store,
            l1,
            l2,
            in_dim,
            n_diagnoses,
        }
    }

    fn logits_on_tape(&self, t: &Tape, x: Var) -> Var {
        self.l2.forward(t, t.relu(self.l1.forward(t, x)))
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let t = Tape::new(&self.store);
        let xv = t.constant(x.clone().into_dyn());
        let out = self.logits_on_tape(&t, xv);
        t.value_owned(out)
            .into_dimensionality()
            .expect("head logits are a matrix")
    }

    /// Per-diagnosis probabilities via the sigmoid link; (n, D) in [0, 1].
    pub fn probabilities(&self, x: &Array2<f64>) -> Array2<f64> {
        self.logits(x).mapv(|z| 1.0 / (1.0 + (-z).exp()))
    }
}

/// A trained diagnosis head with its prospective-split evaluation.
#[derive(Debug)]
pub struct MultilabelOutcome {
    pub head: DiagnosisHead,
    /// Per-diagnosis AUROC on the prospective split; absent where that
    /// split has no positives (or no negatives) for the diagnosis.
    pub eval_auroc: Vec<Option<f64>>,
    /// (step, training loss).
    pub curve: Vec<(usize, f64)>,
}

/// Train the multi-label diagnosis head on the retrospective split with
/// per-diagnosis positive weighting, then score per-diagnosis AUROC on the
/// prospective split.
pub fn train_multilabel_head(
    table: &FeatureTable,
    cfg: &HeadTrainConfig,
) -> Result<MultilabelOutcome> {
    cfg.validate()?;
    table.validate()?;
    if table.n_diagnoses == 0 {
        return Err(Error::config("the table names no diagnoses"));
    }
    let (x_train, train_rows) = split_matrix(table, Split::Retrospective)?;
    let (x_eval, eval_rows) = split_matrix(table, Split::Prospective)?;
    let y_train = label_matrix(&train_rows, table.n_diagnoses);
    let weights = positive_weights(&y_train);
    let mut head = DiagnosisHead::new(table.dim, cfg.hidden, table.n_diagnoses, cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        head.store.len(),
    );
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t = Tape::new(&head.store);
        let x = t.constant(x_train.clone().into_dyn());
        let logits = head.logits_on_tape(&t, x);
        let loss = t.bce_with_logits_mean(logits, y_train.clone().into_dyn(), Some(weights.clone()));
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::degenerate(format!(
                "non-finite diagnosis loss at step {step}"
            )));
        }
        let grads = t.backward(loss);
        adam.step(&mut head.store, &grads);
        curve.push((step, value));
    }
    let probs = head.probabilities(&x_eval);
    let eval_auroc = (0..table.n_diagnoses)
        .map(|j| {
            let scores: Vec<f64> = probs.column(j).to_vec();
            let labels: Vec<bool> = eval_rows.iter().map(|r| r.label_bits[j] != 0).collect();
            auroc(&scores, &labels)
        })
        .collect();
    Ok(MultilabelOutcome {
        head,
        eval_auroc,
        curve,
    })
}

// ---- priority head -----------------------------------------------------------

/// Candidate losses for the referral-priority head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryOrdinal,
    OrdinalMetric,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::CrossEntropy,
        LossKind::BinaryOrdinal,
        LossKind::OrdinalMetric,
    ];

    /// Parse a command-line spelling.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "binord" | "binary_ordinal" => Ok(LossKind::BinaryOrdinal),
            "ordmetric" | "ordinal_metric" => Ok(LossKind::OrdinalMetric),
            other => Err(Error::config(format!(
                "unknown priority loss `{other}`; expected ce, binord, or ordmetric"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::BinaryOrdinal => "binary_ordinal",
            LossKind::OrdinalMetric => "ordinal_metric",
        }
    }
}

/// Decode a cumulative-probability pair (p(y > normal), p(y > medium)) by
/// thresholding both at 0.5 and counting exceedances; the count is the
/// class index, so the decision is non-decreasing in each probability.
pub fn decode_binary_ordinal(p_gt_normal: f64, p_gt_medium: f64) -> Priority {
    let c = usize::from(p_gt_normal > 0.5) + usize::from(p_gt_medium > 0.5);
    Priority::from_index(c).expect("two thresholds decode to at most class 2")
}

/// 3-class priority head. Cross-entropy and binary-ordinal variants emit
/// logits; the ordinal-metric variant emits an embedding classified by its
/// nearest class centroid.
#[derive(Debug)]
pub struct PriorityHead {
    pub kind: LossKind,
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    pub in_dim: usize,
    /// Class centroids in the metric space, one row per priority in
    /// ascending order; set after ordinal-metric training.
    pub centroids: Option<Array2<f64>>,
}

impl PriorityHead {
    fn new(kind: LossKind, in_dim: usize, hidden: usize, metric_dim: usize, seed: u64) -> Self {
        let out_dim = match kind {
            LossKind::CrossEntropy => 3,
            LossKind::BinaryOrdinal => 2,
            LossKind::OrdinalMetric => metric_dim,
        };
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "priority-head", 0);
        let l1 = Linear::new(&mut store, &mut r, "pri.l1", in_dim, hidden, true);
        let l2 = Linear::new(&mut store, &mut r, "pri.l2", hidden, out_dim, true);
        Self {
            kind,
            store,
            l1,
            l2,
            in_dim,
            centroids: None,
        }
    }

    fn outputs_on_tape(&self, t: &Tape, x: Var) -> Var {
        self.l2.forward(t, t.relu(self.l1.forward(t, x)))
    }

    /// Raw head outputs: logits for the two classification losses, metric
    /// embeddings for the ordinal-metric loss.
    pub fn raw_outputs(&self, x: &Array2<f64>) -> Array2<f64> {
        let t = Tape::new(&self.store);
        let xv = t.constant(x.clone().into_dyn());
        let out = self.outputs_on_tape(&t, xv);
        t.value_owned(out)
            .into_dimensionality()
            .expect("head outputs are a matrix")
    }

    /// Squared Euclidean distances to the class centroids, (n, 3).
    fn centroid_distances(&self, embeddings: &Array2<f64>) -> Array2<f64> {
        let centroids = self
            .centroids
            .as_ref()
            .expect("ordinal-metric heads learn centroids during training");
        let mut d = Array2::zeros((embeddings.nrows(), centroids.nrows()));
        for (i, e) in embeddings.rows().into_iter().enumerate() {
            for (c, centroid) in centroids.rows().into_iter().enumerate() {
                d[[i, c]] = e
                    .iter()
                    .zip(centroid.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        d
    }

    /// Per-class scores in [0, 1], columns ordered normal, medium, high.
    /// Cross-entropy: softmax probabilities. Binary-ordinal: class scores
    /// assembled from the two cumulative probabilities. Ordinal-metric:
    /// softmax over negative squared centroid distances.
    pub fn class_scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let raw = self.raw_outputs(x);
        match self.kind {
            LossKind::CrossEntropy => softmax_rows(&raw),
            LossKind::BinaryOrdinal => {
                let mut s = Array2::zeros((raw.nrows(), 3));
                for (i, row) in raw.rows().into_iter().enumerate() {
                    let p1 = sigmoid(row[0]);
                    let p2 = sigmoid(row[1]);
                    s[[i, 0]] = 1.0 - p1;
                    s[[i, 1]] = (p1 - p2).max(0.0);
                    s[[i, 2]] = p2;
                }
                s
            }
            LossKind::OrdinalMetric => softmax_rows(&self.centroid_distances(&raw).mapv(|d| -d)),
        }
    }

    /// Hard decisions. Binary-ordinal decodes by thresholding both
    /// cumulative probabilities at 0.5; the other kinds take the best
    /// class score (nearest centroid for the metric head).
    pub fn decide(&self, x: &Array2<f64>) -> Vec<Priority> {
        match self.kind {
            LossKind::BinaryOrdinal => self
                .raw_outputs(x)
                .rows()
                .into_iter()
                .map(|row| decode_binary_ordinal(sigmoid(row[0]), sigmoid(row[1])))
                .collect(),
            _ => self
                .class_scores(x)
                .rows()
                .into_iter()
                .map(|row| {
                    Priority::from_index(first_argmax(row.as_slice().expect("contiguous row")))
                        .expect("3 classes")
                })
                .collect(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// 3×3 confusion counts; rows are the true class, columns the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Priority, Priority)>) -> Self {
        let mut counts = [[0usize; 3]; 3];
        for (truth, pred) in pairs {
            counts[truth.as_index()][pred.as_index()] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn errors(&self) -> usize {
        self.total() - self.correct()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }

    /// Symmetric confusion between two classes: a-as-b plus b-as-a.
    pub fn confusion_between(&self, a: Priority, b: Priority) -> usize {
        self.counts[a.as_index()][b.as_index()] + self.counts[b.as_index()][a.as_index()]
    }

    pub fn is_diagonal(&self) -> bool {
        self.errors() == 0
    }
}

/// A trained priority head with its prospective-split confusion matrix.
#[derive(Debug)]
pub struct PriorityOutcome {
    pub head: PriorityHead,
    pub confusion: ConfusionMatrix,
    /// (step, training loss).
    pub curve: Vec<(usize, f64)>,
}

/// Train the priority head under one loss on the retrospective split and
/// evaluate its confusion matrix on the prospective split.
///
/// Losses: `cross_entropy` is 3-way softmax cross-entropy; `binary_ordinal`
/// trains the two cumulative tasks y > normal and y > medium with summed
/// binary cross-entropy; `ordinal_metric` trains an embedding with a
/// triplet loss whose margin grows with the ordinal distance between the
/// anchor's and the negative's classes, then classifies by nearest class
/// centroid.
pub fn train_priority_head(
    table: &FeatureTable,
    kind: LossKind,
    cfg: &HeadTrainConfig,
) -> Result<PriorityOutcome> {
    cfg.validate()?;
    table.validate()?;
    let (x_train, train_rows) = split_matrix(table, Split::Retrospective)?;
    let (x_eval, eval_rows) = split_matrix(table, Split::Prospective)?;
    let classes: Vec<usize> = train_rows.iter().map(|r| r.priority.as_index()).collect();
    let mut head = PriorityHead::new(kind, table.dim, cfg.hidden, cfg.metric_dim, cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        head.store.len(),
    );
    let mut curve = Vec::with_capacity(cfg.steps);

    let mut by_class: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, &c) in classes.iter().enumerate() {
        by_class[c].push(i);
    }
    if kind == LossKind::OrdinalMetric && by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::degenerate(
            "ordinal-metric training needs at least one retrospective study per priority class",
        ));
    }

    for step in 0..cfg.steps {
        let t = Tape::new(&head.store);
        let x = t.constant(x_train.clone().into_dyn());
        let out = head.outputs_on_tape(&t, x);
        let loss = match kind {
            LossKind::CrossEntropy => t.cross_entropy_rows(out, &classes),
            LossKind::BinaryOrdinal => {
                let mut targets = Array2::zeros((classes.len(), 2));
                for (i, &c) in classes.iter().enumerate() {
                    targets[[i, 0]] = f64::from(c > 0);
                    targets[[i, 1]] = f64::from(c > 1);
                }
                t.bce_with_logits_mean(out, targets.into_dyn(), None)
            }
            LossKind::OrdinalMetric => {
                triplet_loss_on_tape(&t, out, &by_class, &classes, cfg, step)
            }
        };
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::degenerate(format!(
                "non-finite priority loss at step {step}"
            )));
        }
        let grads = t.backward(loss);
        adam.step(&mut head.store, &grads);
        curve.push((step, value));
    }

    if kind == LossKind::OrdinalMetric {
        let emb = head.raw_outputs(&x_train);
        let mut centroids = Array2::zeros((3, emb.ncols()));
        for (c, members) in by_class.iter().enumerate() {
            for &i in members {
                for j in 0..emb.ncols() {
                    centroids[[c, j]] += emb[[i, j]];
                }
            }
            let n = members.len() as f64;
            for j in 0..emb.ncols() {
                centroids[[c, j]] /= n;
            }
        }
        head.centroids = Some(centroids);
    }

    let preds = head.decide(&x_eval);
    let confusion =
        ConfusionMatrix::from_pairs(eval_rows.iter().map(|r| r.priority).zip(preds));
    Ok(PriorityOutcome {
        head,
        confusion,
        curve,
    })
}

/// Mean hinge over freshly sampled triplets: relu(d²(a,p) − d²(a,n) +
/// margin·|class(a) − class(n)|) with squared Euclidean distances.
fn triplet_loss_on_tape(
    t: &Tape,
    embeddings: Var,
    by_class: &[Vec<usize>; 3],
    classes: &[usize],
    cfg: &HeadTrainConfig,
    step: usize,
) -> Var {
    let mut r = rng::stream(cfg.seed, "priority-triplets", step as u64);
    let n = classes.len();
    let k = cfg.triplets_per_step;
    let mut anchors = Vec::with_capacity(k);
    let mut positives = Vec::with_capacity(k);
    let mut negatives = Vec::with_capacity(k);
    let mut margins = Array1::zeros(k);
    for m in 0..k {
        let a = r.random_range(0..n);
        let ca = classes[a];
        let p = by_class[ca][r.random_range(0..by_class[ca].len())];
        let cn = loop {
            let c = r.random_range(0..3);
            if c != ca {
                break c;
            }
        };
        let neg = by_class[cn][r.random_range(0..by_class[cn].len())];
        anchors.push(a);
        positives.push(p);
        negatives.push(neg);
        margins[m] = cfg.margin * (ca as f64 - cn as f64).abs();
    }
    let av = t.gather_rows(embeddings, &anchors);
    let pv = t.gather_rows(embeddings, &positives);
    let nv = t.gather_rows(embeddings, &negatives);
    let d_ap = t.sum_axis1(t.square(t.sub(av, pv)));
    let d_an = t.sum_axis1(t.square(t.sub(av, nv)));
    let gap = t.add(t.sub(d_ap, d_an), t.constant(margins.into_dyn()));
    t.scale(t.sum_all(t.relu(gap)), 1.0 / k as f64)
}

/// Per-loss evaluation summary used by the loss-comparison harness.
#[derive(Debug, Clone, Serialize)]
pub struct PriorityComparisonEntry {
    pub kind: LossKind,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub normal_high_confusion: usize,
    pub normal_medium_confusion: usize,
}

/// All three priority losses trained on the same table.
#[derive(Debug)]
pub struct PriorityComparison {
    pub outcomes: Vec<(LossKind, PriorityOutcome)>,
    /// The loss with the lowest normal↔high confusion (ties broken by
    /// total errors, then by listed order).
    pub best: LossKind,
}

impl PriorityComparison {
    pub fn entries(&self) -> Vec<PriorityComparisonEntry> {
        self.outcomes
            .iter()
            .map(|(kind, o)| PriorityComparisonEntry {
                kind: *kind,
                confusion: o.confusion,
                accuracy: o.confusion.accuracy(),
                normal_high_confusion: o
                    .confusion
                    .confusion_between(Priority::Normal, Priority::High),
                normal_medium_confusion: o
                    .confusion
                    .confusion_between(Priority::Normal, Priority::Medium),
            })
            .collect()
    }
}

/// Train all three priority losses and flag the one whose prospective
/// confusion between normal and high is lowest.
pub fn compare_priority_losses(
    table: &FeatureTable,
    cfg: &HeadTrainConfig,
) -> Result<PriorityComparison> {
    let mut outcomes = Vec::with_capacity(LossKind::ALL.len());
    for kind in LossKind::ALL {
        outcomes.push((kind, train_priority_head(table, kind, cfg)?));
    }
    let best = outcomes
        .iter()
        .min_by_key(|(_, o)| {
            (
                o.confusion.confusion_between(Priority::Normal, Priority::High),
                o.confusion.errors(),
            )
        })
        .map(|(k, _)| *k)
        .expect("three losses were trained");
    Ok(PriorityComparison { outcomes, best })
}

// ---- prediction records --------------------------------------------------------

/// Final per-study predictions from both frozen heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub study_id: String,
    pub split: Split,
    /// Per-diagnosis sigmoid probabilities.
    pub diagnosis_probabilities: Vec<f64>,
    /// Per-class priority scores, ordered normal, medium, high.
    pub priority_scores: Vec<f64>,
    pub predicted_priority: Priority,
}

/// Run both trained heads over every study in the table. Pure: repeated
/// calls yield identical records, and each row's record is independent of
/// the rest of the batch.
pub fn predict(
    diagnosis: &DiagnosisHead,
    priority: &PriorityHead,
    table: &FeatureTable,
) -> Result<Vec<PredictionRecord>> {
    table.validate()?;
    if diagnosis.in_dim != table.dim || priority.in_dim != table.dim {
        return Err(Error::shape(format!(
            "heads expect {} / {} input features, table holds {}",
            diagnosis.in_dim, priority.in_dim, table.dim
        )));
    }
    if diagnosis.n_diagnoses != table.n_diagnoses {
        return Err(Error::shape(format!(
            "diagnosis head emits {} labels, table holds {}",
            diagnosis.n_diagnoses, table.n_diagnoses
        )));
    }
    let rows: Vec<&FeatureRow> = table.rows.iter().collect();
    let x = FeatureTable::matrix_of(&rows, table.dim);
    let probs = diagnosis.probabilities(&x);
    let scores = priority.class_scores(&x);
    let decisions = priority.decide(&x);
    Ok(rows
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(i, (row, predicted_priority))| PredictionRecord {
            study_id: row.study_id.clone(),
            split: row.split,
            diagnosis_probabilities: probs.row(i).to_vec(),
            priority_scores: scores.row(i).to_vec(),
            predicted_priority,
        })
        .collect())
}
